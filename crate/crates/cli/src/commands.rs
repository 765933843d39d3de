use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use nmsparse::data::{content_hash, load_mnist, synthetic_split, Dataset, SyntheticKind, MNIST_FILES};
use nmsparse::model::MlpModel;
use nmsparse::nm::{compress, encode_nmcx, project, sparsity_ratio, SparsityPattern};
use nmsparse::optim::{Variant, LAMBDA_W_GRID};
use nmsparse::sad::{record_scheme, sad, write_jsonl, Scheme, SchemeConfig};
use nmsparse::tensor::{decode_nmsp, encode_nmsp};
use nmsparse::train::{train, write_metrics_csv, DataSource, TrainConfig, TrainReport, METRICS_HEADER};

use crate::args::{parse_list, resolve_config, CompareArgs, GlobalArgs, ProjectArgs, SadArgs, TrainArgs};
use crate::error::{CliError, CliResult};

/// A hashed input file recorded in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub name: String,
    pub content_hash: String,
}

/// `manifest.json`: enough to reproduce the run with `--config manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: TrainConfig,
    pub inputs: Vec<InputRecord>,
}

pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub inputs: Vec<InputRecord>,
}

pub fn load_data(config: &TrainConfig, data_dir: &Path) -> CliResult<LoadedData> {
    let (mut train, mut test, inputs) = match config.data {
        DataSource::Mnist => {
            let mut inputs = Vec::new();
            for f in &MNIST_FILES {
                let path = data_dir.join(f.name);
                let bytes = fs::read(&path).map_err(|e| {
                    CliError::Data(format!("cannot read {} ({e}); run `nmsparse fetch` first", path.display()))
                })?;
                inputs.push(InputRecord {
                    name: f.name.to_string(),
                    content_hash: content_hash(&bytes),
                });
            }
            let (train, test) = load_mnist(data_dir)?;
            (train, test, inputs)
        }
        DataSource::Blobs | DataSource::Xor => {
            let kind = if config.data == DataSource::Blobs { SyntheticKind::Blobs } else { SyntheticKind::Xor };
            let (train, test) = synthetic_split(kind, config.synthetic_train, config.synthetic_test, config.synthetic_dims, config.seed)?;
            (train, test, Vec::new())
        }
    };
    if let Some(n) = config.train_limit {
        train = train.truncated(n);
    }
    if let Some(n) = config.test_limit {
        test = test.truncated(n);
    }
    Ok(LoadedData { train, test, inputs })
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Trains one configuration and writes `metrics.csv`, `sad.jsonl`,
/// `checkpoint.bin`, `checkpoint.json` and `manifest.json` into `out`.
pub fn run_train(config: &TrainConfig, data: &LoadedData, out: &Path) -> CliResult<TrainReport> {
    fs::create_dir_all(out)?;
    let dims = config.layer_dims(data.train.dims(), data.train.num_classes);
    let mut model = MlpModel::<f32>::init(&dims, config.pattern, config.seed)?;
    let report = train(&mut model, &data.train, &data.test, config)?;

    let mut w = create_file(&out.join("metrics.csv"))?;
    write_metrics_csv(&mut w, &report.metrics)?;
    w.flush()?;
    let mut w = create_file(&out.join("sad.jsonl"))?;
    write_jsonl(&mut w, &report.sad)?;
    w.flush()?;
    fs::write(out.join("checkpoint.bin"), model.checkpoint_bytes())?;
    write_json(&out.join("checkpoint.json"), &model.checkpoint_manifest(config.seed, report.steps))?;
    write_json(
        &out.join("manifest.json"),
        &RunManifest {
            tool: "nmsparse".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            inputs: data.inputs.clone(),
        },
    )?;
    Ok(report)
}

pub fn cmd_train(global: &GlobalArgs, args: &TrainArgs) -> CliResult<()> {
    let config = resolve_config(global, args)?;
    let data = load_data(&config, &global.data_dir)?;
    let report = run_train(&config, &data, &global.out)?;
    let last = report.metrics.last().expect("at least one epoch");
    println!(
        "epoch {} test accuracy {:.4} loss {:.4} (artifacts in {})",
        last.epoch,
        last.accuracy,
        last.loss,
        global.out.display()
    );
    Ok(())
}

/// Final numbers of one compare run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub seed: u64,
    pub final_test_accuracy: f64,
    pub late_sad_mean: f64,
}

fn run_dir_name(variant: Variant, seed: u64) -> String {
    format!("{}-seed{seed}", variant.to_string().replace(':', "_"))
}

pub fn compare_variants(args: &CompareArgs) -> CliResult<Vec<Variant>> {
    match args.preset.as_deref() {
        None => args
            .variants
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| args.train.variant_with_lambdas(s))
            .collect(),
        Some("lambda-grid") => Ok(LAMBDA_W_GRID.iter().map(|&l| Variant::SrSte { lambda_w: l }).collect()),
        Some(other) => Err(CliError::Usage(format!("unknown preset {other:?} (expected lambda-grid)"))),
    }
}

pub fn cmd_compare(global: &GlobalArgs, args: &CompareArgs) -> CliResult<Vec<RunSummary>> {
    let base = resolve_config(global, &args.train)?;
    let variants = compare_variants(args)?;
    if variants.is_empty() {
        return Err(CliError::Usage("no variants to compare".into()));
    }
    let seeds: Vec<u64> = match global.seed {
        Some(s) => vec![s],
        None => parse_list(&args.seeds, "seed")?,
    };
    let mut jobs = Vec::new();
    for &seed in &seeds {
        for &variant in &variants {
            let config = TrainConfig { variant, seed, ..base.clone() };
            config.validate()?;
            jobs.push(config);
        }
    }

    // synthetic data depends on the seed, so load once per seed
    let mut data = BTreeMap::new();
    for &seed in &seeds {
        let probe = TrainConfig { seed, ..base.clone() };
        data.insert(seed, load_data(&probe, &global.data_dir)?);
    }

    let run = |config: &TrainConfig| -> CliResult<(TrainConfig, TrainReport)> {
        let dir = global.out.join(run_dir_name(config.variant, config.seed));
        info!("compare: {} seed {}", config.variant, config.seed);
        let report = run_train(config, &data[&config.seed], &dir)?;
        Ok((config.clone(), report))
    };
    let results: Vec<(TrainConfig, TrainReport)> = if args.jobs <= 1 {
        jobs.iter().map(run).collect::<CliResult<_>>()?
    } else {
        // each job owns its model, optimiser and output directory; results are
        // reduced in job order, so the thread count never changes the output
        let chunk = jobs.len().div_ceil(args.jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(run).collect::<CliResult<Vec<_>>>()))
                .collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().expect("compare worker panicked")?);
            }
            Ok::<_, CliError>(all)
        })?
    };

    let summaries: Vec<RunSummary> = results
        .iter()
        .map(|(c, r)| RunSummary {
            variant: c.variant.to_string(),
            seed: c.seed,
            final_test_accuracy: r.final_test_accuracy().unwrap_or(f64::NAN),
            late_sad_mean: r.late_sad_mean(),
        })
        .collect();

    fs::create_dir_all(&global.out)?;
    let mut w = create_file(&global.out.join("compare.csv"))?;
    writeln!(w, "variant,seed,{METRICS_HEADER}")?;
    for (c, r) in &results {
        for m in &r.metrics {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                c.variant, c.seed, m.epoch, m.split, m.loss, m.accuracy, m.lr, m.sad_total_prev_epoch
            )?;
        }
    }
    w.flush()?;
    write_json(&global.out.join("summary.json"), &summaries)?;
    let table = summary_markdown(&summaries);
    fs::write(global.out.join("summary.md"), &table)?;
    print!("{table}");
    Ok(summaries)
}

pub fn summary_markdown(summaries: &[RunSummary]) -> String {
    let mut s = String::from("# Variant comparison\n\n| variant | seed | final test accuracy | late SAD mean |\n|---|---|---|---|\n");
    for r in summaries {
        s += &format!("| {} | {} | {:.4} | {:.1} |\n", r.variant, r.seed, r.final_test_accuracy, r.late_sad_mean);
    }
    s += "\n| variant | runs | mean final test accuracy | mean late SAD |\n|---|---|---|---|\n";
    let mut order: Vec<&str> = Vec::new();
    for r in summaries {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    for v in order {
        let rows: Vec<&RunSummary> = summaries.iter().filter(|r| r.variant == v).collect();
        let n = rows.len() as f64;
        let acc = rows.iter().map(|r| r.final_test_accuracy).sum::<f64>() / n;
        let sad = rows.iter().map(|r| r.late_sad_mean).sum::<f64>() / n;
        s += &format!("| {v} | {} | {acc:.4} | {sad:.1} |\n", rows.len());
    }
    s += "\nLate SAD: mean epoch-to-epoch mask flips over the last 25% of epochs.\n";
    s
}

/// One row of the SAD analysis output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeSad {
    pub seed: u64,
    pub scheme: String,
    pub t: u64,
    pub per_layer: Vec<u64>,
    pub total: u64,
    pub normalized: Vec<f64>,
}

pub fn cmd_sad_analysis(global: &GlobalArgs, args: &SadArgs) -> CliResult<Vec<SchemeSad>> {
    let base = resolve_config(global, &args.train)?;
    if base.pattern.is_none() {
        return Err(CliError::Usage("sad-analysis needs a sparsity pattern".into()));
    }
    let iters: Vec<u64> = parse_list(&args.iters, "iteration")?;
    let seeds: Vec<u64> = match global.seed {
        Some(s) => vec![s],
        None => parse_list(&args.seeds, "seed")?,
    };
    let lr = args.lr.unwrap_or(base.lr_peak);
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(CliError::Usage(format!("learning rate must be >= 0, got {lr}")));
    }

    let mut rows = Vec::new();
    for &seed in &seeds {
        let config = TrainConfig { seed, ..base.clone() };
        let data = load_data(&config, &global.data_dir)?;
        let dims = config.layer_dims(data.train.dims(), data.train.num_classes);
        let model = MlpModel::<f32>::init(&dims, config.pattern, seed)?;
        let scheme_config = SchemeConfig {
            record_at: iters.clone(),
            lr,
            batch_size: config.batch_size,
            seed,
            sgd: config.sgd(),
        };
        for scheme in [Scheme::S, Scheme::D] {
            let snaps = record_scheme(&model, &data.train, scheme, &scheme_config)?;
            for &t in &iters {
                let snap = snaps.iter().find(|s| s.step == t).expect("every requested step is recorded");
                let r = sad(&snaps[0], snap)?;
                rows.push(SchemeSad {
                    seed,
                    scheme: format!("{scheme:?}"),
                    t,
                    per_layer: r.per_layer,
                    total: r.total,
                    normalized: r.normalized,
                });
            }
        }
    }

    fs::create_dir_all(&global.out)?;
    let mut w = create_file(&global.out.join("sad_analysis.jsonl"))?;
    for r in &rows {
        serde_json::to_writer(&mut w, r).map_err(|e| CliError::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut w = create_file(&global.out.join("sad_analysis.csv"))?;
    writeln!(w, "seed,scheme,t,layer,sad,sad_normalized")?;
    for r in &rows {
        for (l, (raw, norm)) in r.per_layer.iter().zip(&r.normalized).enumerate() {
            writeln!(w, "{},{},{},{l},{raw},{norm}", r.seed, r.scheme, r.t)?;
        }
    }
    w.flush()?;
    for r in &rows {
        println!("seed {} scheme {} t={}: per-layer SAD {:?} (total {})", r.seed, r.scheme, r.t, r.per_layer, r.total);
    }
    Ok(rows)
}

/// Projection outcome as printed by `project`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectReport {
    pub sparsity: f64,
    /// `histogram[k]` = number of groups holding exactly `k` nonzeros.
    pub histogram: Vec<usize>,
    pub nmsp_path: PathBuf,
    pub nmcx_path: PathBuf,
}

pub fn cmd_project(global: &GlobalArgs, args: &ProjectArgs) -> CliResult<ProjectReport> {
    let pattern: SparsityPattern = args.pattern.parse()?;
    let bytes = fs::read(&args.input).map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.input.display())))?;
    let (w, end) = decode_nmsp(&bytes, 0)?;
    if end != bytes.len() {
        return Err(CliError::Data(format!("{}: {} trailing bytes after matrix", args.input.display(), bytes.len() - end)));
    }
    let (wt, mask) = project(&w, pattern)?;
    let compressed = compress(&wt, pattern)?;

    let mut histogram = vec![0usize; pattern.n() + 1];
    for r in 0..wt.rows() {
        for group in wt.row(r).chunks(pattern.m()) {
            histogram[group.iter().filter(|v| **v != 0.0).count()] += 1;
        }
    }

    let stem = match &args.out_prefix {
        Some(p) => p.clone(),
        None => args
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "projected".into()),
    };
    if stem.is_empty() || Path::new(&stem).components().count() != 1 {
        return Err(CliError::Usage(format!("--out-prefix {stem:?} must be a plain file name")));
    }
    fs::create_dir_all(&global.out)?;
    let nmsp_path = global.out.join(format!("{stem}.nmsp"));
    let nmcx_path = global.out.join(format!("{stem}.nmcx"));
    fs::write(&nmsp_path, encode_nmsp(&wt))?;
    fs::write(&nmcx_path, encode_nmcx(&compressed))?;

    let sparsity = sparsity_ratio(&mask);
    println!("pattern {pattern}, {}x{} matrix", wt.rows(), wt.cols());
    println!("sparsity {sparsity:.4}");
    let hist: Vec<String> = histogram.iter().enumerate().map(|(k, c)| format!("{k}:{c}")).collect();
    println!("nonzeros per group {}", hist.join(" "));
    println!("wrote {} and {}", nmsp_path.display(), nmcx_path.display());
    Ok(ProjectReport {
        sparsity,
        histogram,
        nmsp_path,
        nmcx_path,
    })
}
