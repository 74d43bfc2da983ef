//! `cpdsa` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use cpdsa::backprop::{gradient_check, random_problem};
use cpdsa::config::{dataset_geometry, RunConfig};
use cpdsa::data::{self, Dataset, EventFormat, Slicing, SynthSpec, SynthTask};
use cpdsa::network::Model;
use cpdsa::training::{self, convergence, read_trace_jsonl, run_ablation, ParamTraceRecord};
use cpdsa::Error;

#[derive(Parser, Debug)]
#[command(name = "cpdsa", version, about = "Train and inspect CP-DSA spiking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.epochs=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert event files (CSV or packed binary) into frame clips.
    Ingest {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// `csv`, `packed` or `auto`.
        #[arg(long, default_value = "auto")]
        format: String,
        /// Sensor width for CSV input.
        #[arg(long, default_value_t = 128)]
        width: u16,
        /// Sensor height for CSV input.
        #[arg(long, default_value_t = 128)]
        height: u16,
        /// Class label stored with every clip.
        #[arg(long, default_value_t = 0)]
        label: usize,
        /// `duration:<microseconds>` or `count:<slices>`.
        #[arg(long, default_value = "count:5")]
        slicing: String,
        /// Resample frames to `<H>x<W>`.
        #[arg(long)]
        resize: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured model; writes model.json and metrics.jsonl.
    Train(RunArgs),
    /// Evaluate a trained model on the configured data.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Finite-difference audit of the reverse pass.
    Gradcheck(RunArgs),
    /// Train every ablation variant over the configured seeds.
    Ablate(RunArgs),
    /// Export a parameter trace as CSV and SVG charts.
    Track {
        /// metrics.jsonl written by `train`.
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 5)]
        time_steps: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Key=value run manifest.
struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    fn new(verb: &str) -> Self {
        let mut m = Manifest { lines: Vec::new() };
        m.add("verb", verb);
        m.add("cpdsa_version", env!("CARGO_PKG_VERSION"));
        m
    }

    fn add(&mut self, k: &str, v: impl ToString) {
        self.lines.push((k.to_string(), v.to_string()));
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<(), Error> {
        self.add(&format!("input.{name}"), path.display());
        self.add(&format!("input.{name}.sha256"), digest_path(path)?);
        Ok(())
    }

    fn config(&mut self, cfg: &RunConfig, path: &Path, overrides: &[String], out: &Path) -> Result<(), Error> {
        let resolved = cfg.to_toml()?;
        fs::write(out.join("config.resolved.toml"), &resolved)?;
        self.input("config", path)?;
        for (i, o) in overrides.iter().enumerate() {
            self.add(&format!("override.{i}"), o);
        }
        self.add("config_sha256", hex::encode(Sha256::digest(resolved.as_bytes())));
        self.add("resolved_config", "config.resolved.toml");
        Ok(())
    }

    fn write(&self, out: &Path) -> Result<(), Error> {
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k}={v}");
        }
        fs::write(out.join("manifest.txt"), s)?;
        Ok(())
    }
}

/// SHA-256 of a file, or of every file name and content under a directory
/// in sorted order.
fn digest_path(path: &Path) -> Result<String, Error> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for e in entries {
            h.update(e.file_name().unwrap_or_default().to_string_lossy().as_bytes());
            h.update(fs::read(&e)?);
        }
    } else {
        h.update(fs::read(path)?);
    }
    Ok(hex::encode(h.finalize()))
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_run(args: &RunArgs, verb: &str) -> Result<(RunConfig, Manifest), Error> {
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    fs::create_dir_all(&args.out)?;
    let mut manifest = Manifest::new(verb);
    manifest.config(&cfg, &args.config, &args.overrides, &args.out)?;
    Ok((cfg, manifest))
}

fn load_data(cfg: &RunConfig, args: &RunArgs, manifest: &mut Manifest) -> Result<(Dataset, Dataset), Error> {
    let dataset = cfg.dataset(&config_dir(&args.config))?;
    if let Some(cpdsa::config::DataSource::Dir { path, .. }) = &cfg.data.source {
        let p = if path.is_absolute() { path.clone() } else { config_dir(&args.config).join(path) };
        manifest.input("data", &p)?;
    }
    let (train_ids, test_ids) = data::split_dataset(&dataset.labels(), cfg.data.split_ratio, cfg.data.split_seed)?;
    manifest.add("data.samples", dataset.len());
    manifest.add("data.train", train_ids.len());
    manifest.add("data.test", test_ids.len());
    Ok((dataset.subset(&train_ids), dataset.subset(&test_ids)))
}

fn cmd_train(args: &RunArgs) -> Result<(), Error> {
    let (cfg, mut manifest) = load_run(args, "train")?;
    let (train_set, test_set) = load_data(&cfg, args, &mut manifest)?;
    let model_cfg = cfg.model_config(dataset_geometry(&train_set))?;
    manifest.add("seed.model", model_cfg.seed);
    manifest.add("seed.train", cfg.train.seed);
    let mut model = Model::new(model_cfg)?;
    let outcome = training::train_with(&mut model, &train_set, Some(&test_set), &cfg.train, |_| {})?;
    outcome.write_jsonl(&args.out.join("metrics.jsonl"))?;
    model.save(&args.out.join("model.json"))?;
    manifest.add("model_digest", model.digest());
    if let Some(m) = outcome.metrics.last() {
        manifest.add("final.loss", m.loss);
        manifest.add("final.train_accuracy", m.train_accuracy);
        if let Some(t) = m.test_accuracy {
            manifest.add("final.test_accuracy", t);
        }
        println!(
            "epoch {} loss {:.4} train {:.4} test {}",
            m.epoch,
            m.loss,
            m.train_accuracy,
            m.test_accuracy.map_or("-".into(), |t| format!("{t:.4}"))
        );
    }
    manifest.add("outputs", "model.json,metrics.jsonl,config.resolved.toml");
    manifest.write(&args.out)
}

fn cmd_eval(args: &RunArgs, model_path: &Path) -> Result<(), Error> {
    let (cfg, mut manifest) = load_run(args, "eval")?;
    manifest.input("model", model_path)?;
    let model = Model::load(model_path)?;
    let (_, test_set) = load_data(&cfg, args, &mut manifest)?;
    let e = training::evaluate(&model, &test_set, cfg.train.batch_size)?;
    fs::write(args.out.join("eval.json"), serde_json::to_string_pretty(&e)?)?;
    println!("accuracy {:.4} loss {:.4}", e.accuracy, e.loss);
    manifest.add("accuracy", e.accuracy);
    manifest.add("outputs", "eval.json,config.resolved.toml");
    manifest.write(&args.out)
}

/// Returns whether every seed passed.
fn cmd_gradcheck(args: &RunArgs) -> Result<bool, Error> {
    let (cfg, mut manifest) = load_run(args, "gradcheck")?;
    let model_cfg = cfg.model_config(cfg.data_geometry())?;
    let opts = cfg.gradcheck.options();
    let mut text = String::new();
    let mut kv = String::new();
    let mut all = true;
    for &seed in &cfg.gradcheck.seeds {
        let (model, input, labels) = random_problem(model_cfg.clone(), cfg.gradcheck.batch, seed)?;
        let report = gradient_check(&model, &input, &labels, &opts)?;
        all &= report.passed();
        let _ = writeln!(text, "seed {seed}\n{}", report.to_text());
        for line in report.to_key_values().lines() {
            let _ = writeln!(kv, "seed.{seed}.{line}");
        }
        println!("seed {seed}: max relative error {:.3e} {}", report.max_rel(), if report.passed() { "PASS" } else { "FAIL" });
    }
    let _ = writeln!(kv, "passed={all}");
    fs::write(args.out.join("gradcheck.txt"), text)?;
    fs::write(args.out.join("gradcheck.kv"), kv)?;
    manifest.add("seeds", format!("{:?}", cfg.gradcheck.seeds));
    manifest.add("passed", all);
    manifest.add("outputs", "gradcheck.txt,gradcheck.kv,config.resolved.toml");
    manifest.write(&args.out)?;
    Ok(all)
}

fn cmd_ablate(args: &RunArgs) -> Result<(), Error> {
    let (cfg, mut manifest) = load_run(args, "ablate")?;
    let (train_set, test_set) = load_data(&cfg, args, &mut manifest)?;
    let model_cfg = cfg.model_config(dataset_geometry(&train_set))?;
    let table = run_ablation(&model_cfg, &cfg.train, &train_set, &test_set, &cfg.ablation.variants, &cfg.ablation.seeds)?;
    fs::write(args.out.join("ablation.txt"), table.to_text())?;
    fs::write(args.out.join("ablation.csv"), table.to_csv())?;
    print!("{}", table.to_text());
    manifest.add("seeds", format!("{:?}", cfg.ablation.seeds));
    manifest.add("outputs", "ablation.txt,ablation.csv,config.resolved.toml");
    manifest.write(&args.out)
}

fn svg_chart(title: &str, series: &[(String, Vec<(usize, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const M: f64 = 40.0;
    const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x_max, mut y_lo, mut y_hi) = (1usize, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x_max = x_max.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if !y_lo.is_finite() || y_hi - y_lo < 1e-12 {
        y_lo = if y_lo.is_finite() { y_lo - 0.5 } else { 0.0 };
        y_hi = y_lo + 1.0;
    }
    let px = |x: usize| M + (W - 2.0 * M) * x as f64 / x_max as f64;
    let py = |y: f64| H - M - (H - 2.0 * M) * (y - y_lo) / (y_hi - y_lo);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{M}" y="20" font-size="14">{title}</text>"#);
    let _ = writeln!(s, r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - M, W - M, H - M);
    let _ = writeln!(s, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M);
    let _ = writeln!(s, r#"<text x="4" y="{}">{y_hi:.3}</text><text x="4" y="{}">{y_lo:.3}</text>"#, M + 4.0, H - M);
    let _ = writeln!(s, r#"<text x="{}" y="{}">epoch {x_max}</text>"#, W - M - 40.0, H - M + 16.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#, W - M + 2.0 - 80.0, M + 14.0 * i as f64);
    }
    s.push_str("</svg>\n");
    s
}

fn cmd_track(metrics: &Path, out: &Path) -> Result<(), Error> {
    let text = fs::read_to_string(metrics)?;
    let trace: Vec<ParamTraceRecord> = read_trace_jsonl(&text)?;
    if trace.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no parameter records", metrics.display())));
    }
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("trace.csv")).map_err(|e| Error::Serde(e.to_string()))?;
    let mut header = vec!["epoch".to_string(), "layer".to_string()];
    header.extend(cpdsa::neurons::SCALAR_NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(|e| Error::Serde(e.to_string()))?;
    for r in &trace {
        let mut row = vec![r.epoch.to_string(), r.layer.clone()];
        row.extend(r.scalars.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush()?;
    let mut layers: Vec<String> = Vec::new();
    for r in &trace {
        if !layers.contains(&r.layer) {
            layers.push(r.layer.clone());
        }
    }
    for (k, name) in cpdsa::neurons::SCALAR_NAMES.iter().enumerate() {
        let series: Vec<(String, Vec<(usize, f64)>)> = layers
            .iter()
            .map(|l| {
                let pts = trace.iter().filter(|r| &r.layer == l).map(|r| (r.epoch, r.scalars[k])).collect();
                (l.clone(), pts)
            })
            .collect();
        fs::write(out.join(format!("trace_{name}.svg")), svg_chart(name, &series))?;
    }
    let mut summary = String::from("layer,scalar,early_range,late_range,converged\n");
    for row in convergence(&trace, 10) {
        let _ = writeln!(summary, "{},{},{},{},{}", row.layer, row.scalar, row.early_range, row.late_range, row.converged());
    }
    fs::write(out.join("convergence.csv"), summary)?;
    let mut manifest = Manifest::new("track");
    manifest.input("metrics", metrics)?;
    manifest.add("outputs", "trace.csv,trace_<scalar>.svg,convergence.csv");
    manifest.write(out)
}

fn parse_slicing(s: &str) -> Result<Slicing, Error> {
    let bad = || Error::Config(format!("slicing {s:?} must be duration:<us> or count:<slices>"));
    let (kind, v) = s.split_once(':').ok_or_else(bad)?;
    match kind {
        "duration" => Ok(Slicing::FixedDuration { dt_us: v.parse().map_err(|_| bad())? }),
        "count" => Ok(Slicing::FixedCount { slices: v.parse().map_err(|_| bad())? }),
        _ => Err(bad()),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_ingest(
    inputs: &[PathBuf],
    format: &str,
    width: u16,
    height: u16,
    label: usize,
    slicing: &str,
    resize: Option<&str>,
    out: &Path,
) -> Result<(), Error> {
    let slicing = parse_slicing(slicing)?;
    let resize = match resize {
        None => None,
        Some(r) => {
            let (h, w) = r
                .split_once('x')
                .and_then(|(h, w)| Some((h.parse::<usize>().ok()?, w.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::Config(format!("resize {r:?} must be <H>x<W>")))?;
            Some((h, w))
        }
    };
    let fixed = match format {
        "auto" => None,
        "csv" => Some(EventFormat::Csv),
        "packed" => Some(EventFormat::Packed),
        other => return Err(Error::Config(format!("unknown event format {other:?}"))),
    };
    fs::create_dir_all(out)?;
    let mut manifest = Manifest::new("ingest");
    for (i, path) in inputs.iter().enumerate() {
        let bytes = fs::read(path)?;
        let fmt = fixed.unwrap_or_else(|| EventFormat::sniff(&bytes));
        let mut stream = data::parse_events(&bytes, fmt, width, height)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        stream.label = Some(label);
        let mut clip = data::integrate_frames(&stream, slicing)?;
        clip.provenance.source = path.display().to_string();
        if let Some(t) = resize {
            clip = data::downsample(&clip, t)?;
        }
        let stem = path.file_stem().map_or(format!("clip_{i:05}"), |s| s.to_string_lossy().into_owned());
        data::write_clip(out, &stem, &clip)?;
        manifest.input(&format!("events.{i}"), path)?;
        println!("{} -> {stem}: {} events, {} slices", path.display(), stream.events.len(), clip.time_steps());
    }
    manifest.add("slicing", format!("{slicing:?}"));
    manifest.add("label", label);
    manifest.write(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    task: &str,
    time_steps: usize,
    classes: usize,
    n: usize,
    height: usize,
    width: usize,
    noise: f64,
    seed: u64,
    out: &Path,
) -> Result<(), Error> {
    let task: SynthTask = task.parse()?;
    let spec = SynthSpec {
        task,
        time_steps,
        classes,
        n,
        height,
        width,
        noise,
        seed,
    };
    let d = data::make_synthetic(&spec).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Config(m),
        e => e,
    })?;
    d.save_dir(out)?;
    let mut manifest = Manifest::new("synth");
    manifest.add("task", task.name());
    manifest.add("time_steps", time_steps);
    manifest.add("classes", classes);
    manifest.add("n", n);
    manifest.add("height", height);
    manifest.add("width", width);
    manifest.add("noise", noise);
    manifest.add("seed", seed);
    manifest.write(out)?;
    println!("wrote {} clips to {}", d.len(), out.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Ingest {
            inputs,
            format,
            width,
            height,
            label,
            slicing,
            resize,
            out,
        } => cmd_ingest(&inputs, &format, width, height, label, &slicing, resize.as_deref(), &out).map(|_| true),
        Command::Train(a) => cmd_train(&a).map(|_| true),
        Command::Eval { run, model } => cmd_eval(&run, &model).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| true),
        Command::Track { metrics, out } => cmd_track(&metrics, &out).map(|_| true),
        Command::Synth {
            task,
            time_steps,
            classes,
            n,
            height,
            width,
            noise,
            seed,
            out,
        } => cmd_synth(&task, time_steps, classes, n, height, width, noise, seed, &out).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
