//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use celltwin::calib::{self, Experiment, ParameterSpace};
use celltwin::dagmm::{self, DagmmConfig, DagmmModel};
use celltwin::dataio::{self, CycleFeatures, Normalizer};
use celltwin::degrade::{self, FleetConfig, FleetManifest};
use celltwin::pinn::{self, PinnConfig, SohModel};
use celltwin::protocol::{self, CsvTelemetryWriter, CycleRecord, CycleSchedule, Family};
use celltwin::provenance::{comment_header, config_hash};
use celltwin::report::{self, NOISE_LEVELS};
use celltwin::sim::ParamFile;
use sha2::{Digest, Sha256};

use crate::error::{Failure, Result};
use crate::{
    CalibrateArgs, FeaturesArgs, GenDataArgs, PredictArgs, ReportArgs, SimulateArgs, TrainSohArgs, TrainUqArgs,
};

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Input(format!("{}: no such file", path.display())))
    }
}

/// Checks that `out` can be created and is not one of the inputs.
fn require_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(Failure::Input(format!("{}: output directory does not exist", parent.display())));
    }
    if out.is_dir() {
        return Err(Failure::Input(format!("{}: is a directory", out.display())));
    }
    let canon = |p: &Path| fs::canonicalize(p).ok();
    if let Some(o) = canon(out) {
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&o)) {
            return Err(Failure::Input(format!("{}: refusing to overwrite an input", out.display())));
        }
    }
    Ok(())
}

fn require_dir_for(dir: &Path) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(Failure::Input(format!("{}: not a directory", dir.display())));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Failure::io(dir))
}

/// SHA-256 of a file, for config hashes over input contents.
fn file_digest(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(Failure::io(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(Failure::io(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes via `f` into a new file, removing it again on failure.
fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(path).map_err(Failure::io(path))?;
    let mut w = BufWriter::new(file);
    let r = f(&mut w).and_then(|()| w.flush().map_err(Failure::io(path)));
    if r.is_err() {
        let _ = fs::remove_file(path);
    }
    r
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Failure::Input(e.to_string()))?;
        writeln!(w).map_err(Failure::io(path))
    })
}

fn load_params(path: Option<&Path>) -> Result<ParamFile> {
    match path {
        Some(p) => {
            require_file(p)?;
            Ok(ParamFile::load(p)?)
        }
        None => Ok(ParamFile::default()),
    }
}

fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p).map_err(Failure::io(p))?;
            toml::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))
        }
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    if let Some(p) = &a.protocol {
        require_file(p)?;
    }
    let inputs: Vec<&Path> = a.params.iter().chain(&a.protocol).map(PathBuf::as_path).collect();
    require_output(&a.out, &inputs)?;
    if !(a.dt > 0.0 && a.dt.is_finite()) {
        return Err(Failure::Input(format!("time step {} must be positive", a.dt)));
    }
    let file = load_params(a.params.as_deref())?;

    if let Some(rates) = &a.rates {
        if rates.is_empty() || rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Failure::Input("rates must be positive".into()));
        }
        let exp = Experiment {
            dt: a.dt,
            ..Experiment::default()
        };
        let hash = config_hash(&(file.to_toml_string(), rates, &exp));
        let records = rates
            .iter()
            .enumerate()
            .map(|(k, &r)| {
                calib::simulate_discharge(&file, &file.params, r, &exp, &a.cell_id, k as u32).map_err(Failure::Numeric)
            })
            .collect::<Result<Vec<_>>>()?;
        return write_file(&a.out, |w| {
            let mut tw =
                CsvTelemetryWriter::new(w, a.cell_id.clone(), Some(&comment_header(a.seed, &hash))).map_err(Failure::io(&a.out))?;
            for rec in &records {
                for row in rec.rows() {
                    tw.write_record(&row).map_err(Failure::io(&a.out))?;
                }
            }
            tw.into_inner().map(|_| ()).map_err(Failure::io(&a.out))
        });
    }

    let schedule = match (&a.protocol, &a.family) {
        (Some(p), _) => CycleSchedule::load(p)?,
        (None, Some(f)) => {
            let family: Family = f.parse()?;
            CycleSchedule::for_family(family, a.cycles, 298.15, file.params.q_nom)
        }
        (None, None) => return Err(Failure::Input("one of --protocol, --family or --rates is required".into())),
    };
    let spm = file.simulator()?;
    let hash = config_hash(&(file.to_toml_string(), schedule.to_toml_string(), a.dt));
    write_file(&a.out, |w| {
        let mut tw =
            CsvTelemetryWriter::new(w, a.cell_id.clone(), Some(&comment_header(a.seed, &hash))).map_err(Failure::io(&a.out))?;
        protocol::run_schedule(&spm, &schedule, a.seed, a.dt, &mut tw)?;
        tw.into_inner().map(|_| ()).map_err(Failure::io(&a.out))
    })?;
    log::info!("{}: {} cycle(s) written", a.out.display(), schedule.repeat_count);
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let families = a
        .families
        .iter()
        .map(|f| f.trim().parse::<Family>())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    require_dir_for(&a.out_dir)?;
    let base = load_params(a.params.as_deref())?;
    let cfg = FleetConfig::new(families, a.cells, a.cycles);
    cfg.validate()?;
    create_dir(&a.out_dir)?;
    let manifest = degrade::generate_fleet(&base, &cfg, a.seed, &a.out_dir)?;
    log::info!(
        "{}: {} telemetry files, config hash {}",
        a.out_dir.display(),
        manifest.files.len(),
        manifest.config_hash
    );
    Ok(())
}

/// Telemetry files, labels and cycle count of a features input.
struct Source {
    files: Vec<PathBuf>,
    labels: Option<PathBuf>,
    cycles: Option<u32>,
}

fn resolve_source(a: &FeaturesArgs) -> Result<Source> {
    if a.data.is_file() {
        return Ok(Source {
            files: vec![a.data.clone()],
            labels: a.labels.clone(),
            cycles: None,
        });
    }
    if !a.data.is_dir() {
        return Err(Failure::Input(format!("{}: no such file or directory", a.data.display())));
    }
    let manifest_path = a.data.join("manifest.json");
    if manifest_path.is_file() {
        let text = fs::read_to_string(&manifest_path).map_err(Failure::io(&manifest_path))?;
        let m: FleetManifest = serde_json::from_str(&text)
            .map_err(|e| Failure::Input(format!("{}: {e}", manifest_path.display())))?;
        return Ok(Source {
            files: m.files.iter().map(|f| a.data.join(f)).collect(),
            labels: a.labels.clone().or_else(|| Some(a.data.join(&m.labels))),
            cycles: Some(m.cycles),
        });
    }
    let tele = a.data.join("telemetry");
    let dir = if tele.is_dir() { tele } else { a.data.clone() };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(Failure::io(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != "labels.csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Input(format!("{}: no telemetry CSV files", dir.display())));
    }
    let default_labels = a.data.join("labels.csv");
    Ok(Source {
        files,
        labels: a.labels.clone().or_else(|| default_labels.is_file().then_some(default_labels)),
        cycles: None,
    })
}

pub fn features(a: &FeaturesArgs) -> Result<()> {
    let src = resolve_source(a)?;
    for f in &src.files {
        require_file(f)?;
    }
    if let Some(l) = &src.labels {
        require_file(l)?;
    }
    let mut inputs: Vec<&Path> = src.files.iter().map(PathBuf::as_path).collect();
    inputs.extend(src.labels.as_deref());
    require_output(&a.out, &inputs)?;
    if let Some(d) = &a.split_dir {
        require_dir_for(d)?;
    }

    let records: Vec<Vec<CycleRecord>> =
        degrade::parallel_map(&src.files, |f| dataio::load_telemetry(f).map_err(Failure::from))?;
    let max_cycle = a
        .max_cycle
        .or(src.cycles)
        .or_else(|| records.iter().flatten().map(|r| r.cycle + 1).max())
        .unwrap_or(1);
    let mut rows: Vec<CycleFeatures> = degrade::parallel_map(&records, |recs| {
        recs.iter()
            .map(|r| dataio::extract_features(r, max_cycle))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(Failure::from)
    })?
    .into_iter()
    .flatten()
    .collect();
    rows.sort_by(|x, y| (&x.cell_id, x.cycle).cmp(&(&y.cell_id, y.cycle)));
    if let Some(l) = &src.labels {
        dataio::join_labels(&mut rows, &dataio::load_labels(l)?);
    }

    let mut digests = src.files.iter().map(|f| file_digest(f)).collect::<Result<Vec<_>>>()?;
    if let Some(l) = &src.labels {
        digests.push(file_digest(l)?);
    }
    let hash = config_hash(&(digests, max_cycle, a.test_fraction));
    let header = comment_header(a.seed, &hash);
    let write = |path: &Path, rows: &[CycleFeatures]| {
        write_file(path, |w| dataio::write_features(w, rows, Some(&header)).map_err(Failure::io(path)))
    };
    write(&a.out, &rows)?;
    log::info!("{}: {} rows", a.out.display(), rows.len());
    if let Some(d) = &a.split_dir {
        let (train, test) = dataio::split_by_cell(&rows, a.test_fraction, a.seed)?;
        create_dir(d)?;
        write(&d.join("train.csv"), &train)?;
        write(&d.join("test.csv"), &test)?;
        log::info!("split: {} train rows, {} test rows", train.len(), test.len());
    }
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs) -> Result<()> {
    require_file(&a.data)?;
    require_file(&a.space)?;
    let mut inputs = vec![a.data.as_path(), a.space.as_path()];
    inputs.extend(a.params.as_deref());
    require_output(&a.out, &inputs)?;
    if let Some(r) = &a.report {
        require_dir_for(r)?;
    }
    let file = load_params(a.params.as_deref())?;
    let space = ParameterSpace::load(&a.space)?;
    let min = 2 * space.dim();
    if a.budget < min {
        return Err(Failure::Input(format!(
            "budget {} is below the required minimum {min} (2 × {} dimensions)",
            a.budget,
            space.dim()
        )));
    }
    let records = dataio::load_telemetry(&a.data)?;
    let refs = calib::references_from_records(&records, file.params.q_nom)?;
    let exp = Experiment::default();
    let hash = config_hash(&(
        file_digest(&a.data)?,
        space.to_toml_string(),
        file.to_toml_string(),
        a.budget,
        &exp,
    ));
    let header = comment_header(a.seed, &hash);
    let cal = calib::calibrate(&space, &file, &refs, &exp, a.budget, a.seed)?;

    let best = ParamFile {
        params: cal.best.theta.clone(),
        ..file.clone()
    };
    write_file(&a.out, |w| {
        w.write_all(header.as_bytes())
            .and_then(|()| w.write_all(best.to_toml_string().as_bytes()))
            .map_err(Failure::io(&a.out))
    })?;
    for m in &cal.best.per_rate {
        log::info!(
            "{}: voltage MAPE {:.3}%, temperature MAPE {:.3}%",
            calib::rate_label(m.rate),
            m.mape_v,
            m.mape_t
        );
    }
    if let Some(dir) = &a.report {
        create_dir(dir)?;
        let rates: Vec<f64> = refs.iter().map(|r| r.rate).collect();
        let hist = dir.join("history.csv");
        write_file(&hist, |w| {
            calib::write_history(w, &cal, &space, &rates, Some(&header)).map_err(Failure::io(&hist))
        })?;
        let overlay = dir.join("overlay.csv");
        write_file(&overlay, |w| {
            calib::write_overlay(w, &file, &cal.best.theta, &refs, &exp, Some(&header)).map_err(Failure::Numeric)
        })?;
        let per_rate: Vec<_> = cal
            .best
            .per_rate
            .iter()
            .map(|m| serde_json::json!({"rate": m.rate, "mape_v": m.mape_v, "mape_t": m.mape_t}))
            .collect();
        write_json(
            &dir.join("summary.json"),
            &serde_json::json!({
                "seed": a.seed,
                "config_hash": hash,
                "evaluations": cal.history.len(),
                "failed": cal.history.iter().filter(|r| r.failed).count(),
                "best_j": cal.best.j,
                "per_rate": per_rate,
            }),
        )?;
    }
    Ok(())
}

fn loss_log<T>(path: &Path, header: &str, cols: &str, rows: &[T], fmt: impl Fn(&T) -> String) -> Result<()> {
    write_file(path, |w| {
        (|| -> std::io::Result<()> {
            w.write_all(header.as_bytes())?;
            writeln!(w, "{cols}")?;
            for r in rows {
                writeln!(w, "{}", fmt(r))?;
            }
            Ok(())
        })()
        .map_err(Failure::io(path))
    })
}

pub fn train_soh(a: &TrainSohArgs) -> Result<()> {
    require_file(&a.train)?;
    let mut inputs = vec![a.train.as_path()];
    inputs.extend(a.config.as_deref());
    require_output(&a.out, &inputs)?;
    if let Some(l) = &a.loss_log {
        require_output(l, &inputs)?;
    }
    let mut cfg: PinnConfig = load_toml(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let rows = dataio::load_features(&a.train)?;
    let hash = config_hash(&(file_digest(&a.train)?, &cfg, a.q_nom));
    let (mut model, log) = pinn::train(&rows, &cfg, a.q_nom, a.seed)?;
    model.config_hash = hash.clone();
    model.save(&a.out)?;
    let (first, last) = (log[0].terms.total, log[log.len() - 1].terms.total);
    log::info!("loss {first:.4e} -> {last:.4e} over {} epochs", log.len());
    if let Some(l) = &a.loss_log {
        loss_log(l, &comment_header(a.seed, &hash), "epoch,total,data,mono,phys", &log, |e| {
            format!(
                "{},{:.10e},{:.10e},{:.10e},{:.10e}",
                e.epoch, e.terms.total, e.terms.data, e.terms.mono, e.terms.phys
            )
        })?;
    }
    Ok(())
}

pub fn predict_soh(a: &PredictArgs) -> Result<()> {
    require_file(&a.model)?;
    require_file(&a.features)?;
    require_output(&a.out, &[&a.model, &a.features])?;
    let model = SohModel::load(&a.model)?;
    let rows = dataio::load_features(&a.features)?;
    let pred = model.predict(&rows)?;
    let header = comment_header(model.seed, &model.config_hash);
    write_file(&a.out, |w| {
        report::write_predictions(w, &rows, &pred, Some(&header)).map_err(Failure::io(&a.out))
    })?;
    if rows.iter().all(|r| r.soh.is_some()) && !rows.is_empty() {
        let ids: Vec<&str> = rows.iter().map(|r| r.cell_id.as_str()).collect();
        let truth: Vec<f64> = rows.iter().filter_map(|r| r.soh).collect();
        let e = pinn::track_errors(&ids, &truth, &pred);
        log::info!("pooled MAPE {:.3}%", e.pooled);
        for (f, m) in &e.per_family {
            log::info!("  {f}: {m:.3}%");
        }
    }
    Ok(())
}

pub fn train_uq(a: &TrainUqArgs) -> Result<()> {
    require_file(&a.train)?;
    let mut inputs = vec![a.train.as_path()];
    inputs.extend(a.soh_model.as_deref());
    inputs.extend(a.config.as_deref());
    for p in &inputs {
        require_file(p)?;
    }
    require_output(&a.out, &inputs)?;
    if let Some(l) = &a.loss_log {
        require_output(l, &inputs)?;
    }
    let mut cfg: DagmmConfig = load_toml(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let rows = dataio::load_features(&a.train)?;
    let normalizer: Normalizer = match &a.soh_model {
        Some(p) => SohModel::load(p)?.normalizer,
        None => Normalizer::fit(&rows)?,
    };
    let hash = config_hash(&(file_digest(&a.train)?, &cfg, dagmm::normalizer_hash(&normalizer)));
    let (mut model, log) = dagmm::train(&rows, &normalizer, &cfg, a.seed)?;
    model.config_hash = hash.clone();
    model.save(&a.out)?;
    log::info!(
        "mean energy {:.4} -> {:.4} over {} epochs",
        log[0].terms.energy,
        log[log.len() - 1].terms.energy,
        log.len()
    );
    if let Some(l) = &a.loss_log {
        loss_log(l, &comment_header(a.seed, &hash), "epoch,total,recon,energy,cov_penalty", &log, |e| {
            format!(
                "{},{:.10e},{:.10e},{:.10e},{:.10e}",
                e.epoch, e.terms.total, e.terms.recon, e.terms.energy, e.terms.cov_penalty
            )
        })?;
    }
    Ok(())
}

pub fn score_uq(a: &PredictArgs) -> Result<()> {
    require_file(&a.model)?;
    require_file(&a.features)?;
    require_output(&a.out, &[&a.model, &a.features])?;
    let model = DagmmModel::load(&a.model)?;
    let rows = dataio::load_features(&a.features)?;
    let scores = model.score(&rows)?;
    let header = comment_header(model.seed, &model.config_hash);
    write_file(&a.out, |w| {
        report::write_scores(w, &rows, &scores, Some(&header)).map_err(Failure::io(&a.out))
    })
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let mut inputs = vec![a.predictions.as_path()];
    inputs.extend(a.scores.as_deref());
    inputs.extend(a.soh_model.as_deref());
    inputs.extend(a.uq_model.as_deref());
    inputs.extend(a.features.as_deref());
    for p in &inputs {
        require_file(p)?;
    }
    require_dir_for(&a.out_dir)?;
    let pred = report::load_predictions(&a.predictions)?;
    let scores = a.scores.as_deref().map(report::load_scores).transpose()?;
    let metrics = report::build_metrics(&pred, scores.as_deref())?;
    let digests = inputs.iter().map(|p| file_digest(p)).collect::<Result<Vec<_>>>()?;
    let hash = config_hash(&(digests, NOISE_LEVELS));
    let header = comment_header(a.seed, &hash);

    let sweep = match (&a.soh_model, &a.uq_model, &a.features) {
        (Some(s), Some(u), Some(f)) => {
            let soh = SohModel::load(s)?;
            let uq = DagmmModel::load(u)?;
            let rows = dataio::load_features(f)?;
            Some(report::noise_sweep(&soh, &uq, &rows, &NOISE_LEVELS, a.seed)?)
        }
        _ => None,
    };

    create_dir(&a.out_dir)?;
    let traj = a.out_dir.join("soh_trajectories.csv");
    let energy: std::collections::HashMap<(&str, u32), f64> = scores
        .iter()
        .flatten()
        .map(|s| ((s.cell_id.as_str(), s.cycle), s.energy))
        .collect();
    write_file(&traj, |w| {
        (|| -> std::io::Result<()> {
            w.write_all(header.as_bytes())?;
            writeln!(w, "cell_id,cycle,soh_true,soh_pred{}", if scores.is_some() { ",energy" } else { "" })?;
            for p in &pred {
                write!(w, "{},{},{:.10},{:.10}", p.cell_id, p.cycle, p.soh_true.unwrap_or(f64::NAN), p.soh_pred)?;
                if scores.is_some() {
                    match energy.get(&(p.cell_id.as_str(), p.cycle)) {
                        Some(e) => write!(w, ",{e:.10e}")?,
                        None => write!(w, ",")?,
                    }
                }
                writeln!(w)?;
            }
            Ok(())
        })()
        .map_err(Failure::io(&traj))
    })?;

    let mut json = serde_json::to_value(&metrics).map_err(|e| Failure::Input(e.to_string()))?;
    json["seed"] = a.seed.into();
    json["config_hash"] = hash.clone().into();
    if let Some(s) = &sweep {
        let path = a.out_dir.join("noise_sweep.csv");
        write_file(&path, |w| {
            (|| -> std::io::Result<()> {
                w.write_all(header.as_bytes())?;
                writeln!(w, "sigma,median_abs_error,mean_abs_error,median_energy")?;
                for p in &s.points {
                    writeln!(
                        w,
                        "{},{:.10e},{:.10e},{:.10e}",
                        p.sigma, p.median_abs_error, p.mean_abs_error, p.median_energy
                    )?;
                }
                Ok(())
            })()
            .map_err(Failure::io(&path))
        })?;
        json["noise_sweep"] = serde_json::json!({
            "spearman_energy_vs_error": s.spearman(),
            "median_energy_non_decreasing": s.median_energy_non_decreasing(),
        });
    }
    write_json(&a.out_dir.join("metrics.json"), &json)?;
    log::info!(
        "MAPE {:.3}% over {} rows{}",
        metrics.mape_overall,
        metrics.rows,
        metrics
            .spearman_energy_vs_error
            .map_or(String::new(), |r| format!(", energy/error rank correlation {r:.3}"))
    );
    Ok(())
}
