//! The `aprop` command-line tool.

pub mod config;
pub mod formats;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use aprop_core::attribution::{AttributionMap, Method};
use aprop_core::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use aprop_core::data::{generate_synthetic, load_mnist, Dataset, SyntheticConfig};
use aprop_core::eval::{self, Order};
use aprop_core::learned::{self, MaskParams};
use aprop_core::model::{Model, ModelSpec};
use aprop_core::optim::{AdamConfig, SgdConfig};
use aprop_core::train::{accuracy, train_from, OptimizerConfig, TrainConfig};
use aprop_core::Tensor;
use clap::{Arg, ArgMatches};
use rayon::prelude::*;

use crate::config::{parse_indices, Command, RunConfig};
use crate::formats::{float, write_csv};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] aprop_core::Error),
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
}

type Result<T> = std::result::Result<T, CliError>;

/// Samples attributed per parallel work item.
const CHUNK: usize = 8;

pub fn cli() -> clap::Command {
    let mut app = clap::Command::new("aprop")
        .about("Attribution maps from learnable backward propagation rules")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for c in Command::ALL {
        let mut sub = clap::Command::new(c.name()).about(c.about()).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value file; flags override it"),
        );
        for k in c.keys() {
            sub = sub.arg(
                Arg::new(k.name)
                    .long(k.name.replace('_', "-"))
                    .value_name("VALUE")
                    .help(format!("{} [default: {}]", k.help, k.default)),
            );
        }
        app = app.subcommand(sub);
    }
    app
}

fn resolve(command: Command, m: &ArgMatches) -> Result<RunConfig> {
    let flags: Vec<(String, String)> = command
        .keys()
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    let file = m.get_one::<String>("config").map(PathBuf::from);
    RunConfig::resolve(command, file.as_deref(), &flags)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = cli().try_get_matches_from(args).map_err(|e| {
        let text = e.to_string();
        CliError::Config(text.lines().next().unwrap_or("invalid arguments").to_string())
    })?;
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let command = Command::ALL
        .into_iter()
        .find(|c| c.name() == name)
        .expect("subcommands mirror Command::ALL");
    run(&resolve(command, sub)?)
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| CliError::Io { path: out.clone(), source: e })?;
    write_atomic(
        out.join(format!("{}_config.txt", cfg.command.name())),
        cfg.to_string().as_bytes(),
    )?;
    let pool = thread_pool()?;
    pool.install(|| match cfg.command {
        Command::Train => cmd_train(cfg),
        Command::Attribute => cmd_attribute(cfg),
        Command::Evaluate => cmd_evaluate(cfg),
        Command::Roar => cmd_roar(cfg),
        Command::Render => cmd_render(cfg),
    })
}

/// Worker pool capped by `APROP_THREADS` when set.
fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("APROP_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Config(format!("APROP_THREADS must be a positive integer, got '{v}'")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

/// Train and test splits of the configured dataset, both carrying the train
/// split's statistics.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.raw("dataset") {
        "mnist" => {
            let dir = PathBuf::from(cfg.raw("data_dir"));
            if !dir.is_dir() {
                return Err(CliError::Config(format!(
                    "dataset directory {} does not exist",
                    dir.display()
                )));
            }
            Ok(load_mnist(&dir)?)
        }
        "synthetic" => {
            let seed = cfg.get("seed")?;
            let all = generate_synthetic(&SyntheticConfig {
                n_samples: cfg.get("synthetic_samples")?,
                image_side: cfg.get("synthetic_side")?,
                noise_std: cfg.get("synthetic_noise")?,
                seed,
            })?;
            let (train, test) = all.split((0.8, 0.2), seed)?;
            let train = train.recompute_stats();
            let test = test.with_stats(train.stats.clone());
            Ok((train, test))
        }
        other => Err(CliError::Config(format!("unknown dataset '{other}'"))),
    }
}

fn split_of(cfg: &RunConfig) -> Result<Dataset> {
    let (train, test) = load_data(cfg)?;
    match cfg.raw("split") {
        "train" => Ok(train),
        "test" => Ok(test),
        other => Err(CliError::Config(format!("split must be train or test, got '{other}'"))),
    }
}

/// `dataset` re-labelled with the model's statistics after checking that
/// the two fit together.
fn matched(model: &Model, dataset: Dataset) -> Result<Dataset> {
    if model.spec.input_shape != dataset.image_shape || model.spec.num_classes != dataset.num_classes {
        return Err(CliError::Config(format!(
            "checkpoint expects {:?} inputs and {} classes, dataset has {:?} and {}",
            model.spec.input_shape, model.spec.num_classes, dataset.image_shape, dataset.num_classes
        )));
    }
    Ok(dataset.denormalize().with_stats(model.norm.clone()))
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.checkpoint_path();
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_checkpoint(&path)?)
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let lr = cfg.get("lr")?;
    let optimizer = match cfg.raw("optimizer") {
        "adam" => OptimizerConfig::Adam(AdamConfig::with_lr(lr)),
        "sgd" => OptimizerConfig::Sgd(SgdConfig {
            lr,
            momentum: cfg.get("momentum")?,
        }),
        other => return Err(CliError::Config(format!("unknown optimizer '{other}'"))),
    };
    Ok(TrainConfig {
        optimizer,
        epochs: cfg.get("epochs")?,
        batch_size: cfg.get("batch_size")?,
        seed: cfg.get("seed")?,
    })
}

/// A method with every tunable setting taken from the configuration.
pub fn method_from(cfg: &RunConfig, name: &str) -> Result<Method> {
    let mut method = Method::from_name(name, cfg.get("seed")?)?;
    match &mut method {
        Method::IntegratedGradients { steps } => *steps = cfg.get("ig_steps")?,
        Method::SmoothGrad { n, sigma, .. } => {
            *n = cfg.get("sg_samples")?;
            *sigma = match cfg.raw("sg_sigma") {
                "auto" => None,
                _ => Some(cfg.get("sg_sigma")?),
            };
        }
        Method::Occlusion { patch, stride, .. } => {
            *patch = cfg.get("occlusion_patch")?;
            *stride = cfg.get("occlusion_stride")?;
        }
        Method::Learned(c) => {
            c.iterations = cfg.get("iters")?;
            c.lr = cfg.get("plugin_lr")?;
            c.mask = MaskParams {
                alpha: cfg.get("alpha")?,
                beta: cfg.get("beta")?,
                gamma: cfg.get("gamma")?,
                lambda: cfg.get("lambda")?,
            };
            c.use_reference = cfg.get("use_reference")?;
            c.sign_aware = cfg.get("sign_aware")?;
            c.post_softmax = cfg.get("post_softmax")?;
            c.validate()?;
        }
        Method::Saliency | Method::GradInput | Method::Random { .. } => {}
    }
    Ok(method)
}

/// Normalized pixels, predicted classes and dataset indices of `indices`.
/// Pixels travel as plain vectors because tensors stay on one thread.
struct Inputs {
    shape: [usize; 3],
    pixels: Vec<Vec<f64>>,
    targets: Vec<usize>,
    ids: Vec<u64>,
}

impl Inputs {
    fn new(model: &Model, data: &Dataset, indices: &[usize]) -> Result<Inputs> {
        let pixels: Vec<Vec<f64>> = indices.iter().map(|&i| data.model_input(i).to_vec()).collect();
        let shape = data.image_shape;
        let images = tensors(shape, &pixels)?;
        Ok(Inputs {
            shape,
            targets: eval::predicted_classes(model, &images)?,
            pixels,
            ids: indices.iter().map(|&i| i as u64).collect(),
        })
    }
}

fn tensors(shape: [usize; 3], pixels: &[Vec<f64>]) -> Result<Vec<Tensor>> {
    Ok(pixels
        .iter()
        .map(|p| Tensor::new(&shape, p.clone()))
        .collect::<std::result::Result<_, _>>()
        .map_err(aprop_core::Error::from)?)
}

/// Maps for every input, computed in parallel chunks; identical to a
/// sequential run.
fn attribute_all(model: &Model, method: &Method, inputs: &Inputs) -> Result<Vec<AttributionMap>> {
    let chunks: Vec<Vec<AttributionMap>> = inputs
        .pixels
        .par_chunks(CHUNK)
        .zip(inputs.targets.par_chunks(CHUNK))
        .zip(inputs.ids.par_chunks(CHUNK))
        .map(|((px, t), ix)| -> Result<Vec<AttributionMap>> {
            Ok(method.attribute_batch(model, &tensors(inputs.shape, px)?, t, ix)?)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (mut train, test) = load_data(cfg)?;
    let limit: usize = cfg.get("train_limit")?;
    if limit > 0 {
        train = train.take(limit);
    }
    let spec = ModelSpec::named(cfg.raw("model"), train.image_shape, train.num_classes)?;
    let tc = train_config(cfg)?;
    let init = aprop_core::model::build_model(&spec, tc.seed)?;
    let mut losses = Vec::new();
    let params = train_from(&spec, init, &train, &tc, |s| {
        losses.push(vec![s.epoch.to_string(), s.step.to_string(), float(s.loss)]);
    })?;
    let model = Model::new(spec, params, train.stats.clone())?;
    let path = cfg.checkpoint_path();
    save_checkpoint(&model, &path)?;
    let train_acc = accuracy(&model, &train)?;
    let test_acc = accuracy(&model, &test)?;
    let out = cfg.out_dir();
    write_csv(&out.join("train_loss.csv"), &["epoch", "step", "loss"], &losses)?;
    write_csv(
        &out.join("train_metrics.csv"),
        &["train_accuracy", "test_accuracy"],
        &[vec![float(train_acc), float(test_acc)]],
    )?;
    println!(
        "train_accuracy={train_acc:.4} test_accuracy={test_acc:.4} checkpoint={}",
        path.display()
    );
    Ok(())
}

fn write_map(out: &Path, stem: &str, map: &AttributionMap) -> Result<()> {
    write_atomic(out.join(format!("{stem}.attr")), &formats::encode_attr(&map.shape, &map.values))?;
    let [_, h, w] = map.shape;
    let pgm = formats::encode_pgm(w, h, &formats::heatmap(&map.channel_sum()));
    write_atomic(out.join(format!("{stem}.pgm")), &pgm)?;
    Ok(())
}

fn cmd_attribute(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let data = matched(&model, split_of(cfg)?)?;
    let indices = parse_indices(cfg.raw("indices"))?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(CliError::Config(format!(
            "index {bad} out of range for {} images",
            data.len()
        )));
    }
    let names: Vec<String> = cfg.list("method")?;
    let methods = names.iter().map(|n| method_from(cfg, n)).collect::<Result<Vec<_>>>()?;
    let inputs = Inputs::new(&model, &data, &indices)?;
    let out = cfg.out_dir();
    let mut written = 0;
    for method in &methods {
        let name = method.name();
        if let Method::Learned(lc) = method {
            let results = inputs
                .pixels
                .par_iter()
                .zip(inputs.targets.par_iter())
                .map(|(px, &t)| -> Result<_> {
                    let image = Tensor::new(&inputs.shape, px.clone()).map_err(aprop_core::Error::from)?;
                    Ok(learned::optimize(&model, &image, t, lc)?)
                })
                .collect::<Result<Vec<_>>>()?;
            for (r, &i) in results.iter().zip(&indices) {
                let stem = format!("{name}_{i}");
                write_map(&out, &stem, &r.map)?;
                let rows: Vec<Vec<String>> = r
                    .loss_trace
                    .iter()
                    .enumerate()
                    .map(|(k, t)| vec![k.to_string(), float(t.positive), float(t.negative), float(t.mask), float(t.total)])
                    .collect();
                write_csv(
                    &out.join(format!("{stem}_loss.csv")),
                    &["iteration", "positive", "negative", "mask", "total"],
                    &rows,
                )?;
                written += 3;
            }
        } else {
            let maps = attribute_all(&model, method, &inputs)?;
            for (map, &i) in maps.iter().zip(&indices) {
                write_map(&out, &format!("{name}_{i}"), map)?;
                written += 2;
            }
        }
    }
    println!("wrote {written} files to {}", out.display());
    Ok(())
}

/// Retained ratios of every sample at every fraction, `None` for skipped
/// samples.
fn ratios(
    model: &Model,
    inputs: &Inputs,
    maps: &[AttributionMap],
    order: Order,
    fractions: &[f64],
) -> Result<Vec<Option<Vec<f64>>>> {
    inputs
        .pixels
        .par_iter()
        .zip(maps.par_iter())
        .map(|(px, m)| -> Result<_> {
            let image = Tensor::new(&inputs.shape, px.clone()).map_err(aprop_core::Error::from)?;
            Ok(eval::sample_ratios(model, &image, m, m.target, order, fractions)?)
        })
        .collect()
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let (_, test) = load_data(cfg)?;
    let data = matched(&model, test)?;
    let samples: usize = cfg.get("samples")?;
    let steps: usize = cfg.get("steps")?;
    if samples == 0 || samples > data.len() || steps == 0 {
        return Err(CliError::Config(format!(
            "need 1 ≤ samples ≤ {} and steps ≥ 1",
            data.len()
        )));
    }
    let indices: Vec<usize> = (0..samples).collect();
    let inputs = Inputs::new(&model, &data, &indices)?;
    let fractions = eval::curve_fractions(steps);
    let (mut morf, mut lerf, mut summary) = (Vec::new(), Vec::new(), Vec::new());
    println!("method,morf_auc,lerf_auc,n,skipped");
    for name in cfg.list::<String>("methods")? {
        let method = method_from(cfg, &name)?;
        let maps = attribute_all(&model, &method, &inputs)?;
        let mo = eval::aggregate(&fractions, &ratios(&model, &inputs, &maps, Order::MostFirst, &fractions)?)?;
        let le = eval::aggregate(&fractions, &ratios(&model, &inputs, &maps, Order::LeastFirst, &fractions)?)?;
        for (rows, curve) in [(&mut morf, &mo), (&mut lerf, &le)] {
            for &(f, r) in &curve.points {
                rows.push(vec![name.clone(), float(f), float(r), curve.n_samples.to_string()]);
            }
        }
        let row = vec![
            name.clone(),
            float(eval::auc(&mo)?),
            float(eval::auc(&le)?),
            mo.n_samples.to_string(),
            mo.skipped.to_string(),
        ];
        println!("{}", row.join(","));
        summary.push(row);
    }
    let out = cfg.out_dir();
    let header = ["method", "fraction", "mean_retained_ratio", "n"];
    write_csv(&out.join("morf.csv"), &header, &morf)?;
    write_csv(&out.join("lerf.csv"), &header, &lerf)?;
    write_csv(&out.join("auc.csv"), &["method", "morf_auc", "lerf_auc", "n", "skipped"], &summary)?;
    Ok(())
}

fn cmd_roar(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let (train, _) = load_data(cfg)?;
    let subset: usize = cfg.get("subset")?;
    let share: f64 = cfg.get("train_fraction")?;
    let all = matched(&model, train)?.take(subset);
    let (tr, te) = all.split((share, 1.0 - share), cfg.get("seed")?)?;
    let te = te.with_stats(tr.stats.clone());
    let fractions: Vec<f64> = cfg.list("fractions")?;
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(CliError::Config(format!("fraction {f} outside [0, 1]")));
    }
    let tc = train_config(cfg)?;
    let baseline = eval::train_and_test(&tr, &te, &model.spec, &tc)?;
    println!("baseline accuracy {baseline:.4}");
    let mut rows = vec![vec!["baseline".to_string(), float(0.0), float(baseline)]];
    for name in cfg.list::<String>("methods")? {
        let method = method_from(cfg, &name)?;
        let maps_of = |d: &Dataset| -> Result<Vec<AttributionMap>> {
            let idx: Vec<usize> = (0..d.len()).collect();
            attribute_all(&model, &method, &Inputs::new(&model, d, &idx)?)
        };
        let (train_maps, test_maps) = (maps_of(&tr)?, maps_of(&te)?);
        for (f, acc) in eval::roar_rows(&tr, &te, &model.spec, &tc, &train_maps, &test_maps, &fractions)? {
            println!("{name} {f} {acc:.4}");
            rows.push(vec![name.clone(), float(f), float(acc)]);
        }
    }
    write_csv(&cfg.out_dir().join("roar.csv"), &["method", "fraction", "test_accuracy"], &rows)
}

fn cmd_render(cfg: &RunConfig) -> Result<()> {
    let attr = PathBuf::from(cfg.raw("attr"));
    if attr.as_os_str().is_empty() {
        return Err(CliError::Config("render needs --attr".into()));
    }
    let bytes = fs::read(&attr).map_err(|e| CliError::Io { path: attr.clone(), source: e })?;
    let (shape, values) = formats::decode_attr(&bytes)?;
    let &[c, h, w] = shape.as_slice() else {
        return Err(CliError::Format(format!("expected a C×H×W map, got shape {shape:?}")));
    };
    let map = AttributionMap::new(values, [c, h, w], "render", 0)?;
    let mode = cfg.raw("mode");
    let (bytes, ext) = match mode {
        "heatmap" => (formats::encode_pgm(w, h, &formats::heatmap(&map.channel_sum())), "pgm"),
        "overlay" => {
            let data = split_of(cfg)?.denormalize();
            let index: usize = cfg
                .get("index")
                .map_err(|_| CliError::Config("overlay needs --index of the image".into()))?;
            if index >= data.len() {
                return Err(CliError::Config(format!("index {index} out of range for {} images", data.len())));
            }
            if data.image_shape != map.shape {
                return Err(CliError::Config(format!(
                    "map shape {:?} does not match image shape {:?}",
                    map.shape, data.image_shape
                )));
            }
            let image = data.image(index);
            let plane = h * w;
            let gray: Vec<f64> = (0..plane)
                .map(|p| (0..c).map(|ch| image[ch * plane + p]).sum::<f64>() / c as f64)
                .collect();
            (formats::encode_ppm(w, h, &formats::overlay(&gray, &map.channel_sum())), "ppm")
        }
        "mask" => {
            let params = MaskParams {
                alpha: cfg.get("alpha")?,
                beta: cfg.get("beta")?,
                gamma: cfg.get("gamma")?,
                ..MaskParams::default()
            };
            params.validate()?;
            let scaled = learned::scale_attribution(&map.tensor())?;
            let masks = learned::generate_masks(&scaled, &params)?;
            let px = formats::mask_pair(w, masks.positive.data(), masks.negative.data());
            (formats::encode_pgm(2 * w, h, &px), "pgm")
        }
        other => return Err(CliError::Config(format!("unknown render mode '{other}'"))),
    };
    let output = match cfg.raw("output") {
        "" => {
            let stem = attr.file_stem().and_then(|s| s.to_str()).unwrap_or("map");
            attr.with_file_name(format!("{stem}_{mode}.{ext}"))
        }
        p => PathBuf::from(p),
    };
    write_atomic(&output, &bytes)?;
    println!("wrote {}", output.display());
    Ok(())
}
