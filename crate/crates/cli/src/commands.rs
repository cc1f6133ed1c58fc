use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use latent_chain::checkpoint::{load_translation_model, Checkpoint, TransplantRecord};
use latent_chain::composer::{apply_chain_named, parse_chain, render_grid};
use latent_chain::config::{Experiment, RunConfig};
use latent_chain::dataset::{
    build_marginal_sets, dataset_manifest, domain_image_paths, exclusion_violations,
    generate_synthetic_domains, load_attribute_index, load_domain_images, load_image,
    read_synthetic_labels, save_png, synthetic_domain_spec, write_domain_datasets,
    write_synthetic_dataset, DatasetManifest, Materialize, ALL_COMBINATIONS,
};
use latent_chain::evaluator::{
    celeba_combination_labels, cycle_consistency_metric, presence_metric,
    synthetic_combination_labels, train_classifier, ComboClassifier, OracleClassifier,
    TrainedClassifier,
};
use latent_chain::model::{NetworkSet, Translator};
use latent_chain::objective::Pairing;
use latent_chain::tensor::Tensor;
use latent_chain::trainer::{warm_start_transplant, Regime, RunOutput, Trainer};

use crate::run::{config_hash, unix_now, write_manifest, DirLock, RunManifest};
use crate::{
    ClassifierArgs, Cli, Command, ComposeArgs, EvaluateArgs, ExperimentArg, MaterializeArg,
    MetricArg, PrepareArgs, RegimeArg, SynthArgs, TrainArgs,
};

/// Missing or contradictory command-line input.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.data.synthetic_seed = s;
        cfg.classifier.seed = s;
    }
    match &cli.command {
        Command::PrepareData(a) => prepare_data(cli, cfg, a),
        Command::SynthData(a) => synth_data(cli, cfg, a),
        Command::Train(a) => train(cli, cfg, a),
        Command::Compose(a) => compose(cli, cfg, a),
        Command::Evaluate(a) => evaluate(cli, cfg, a),
        Command::TrainClassifier(a) => classifier(cli, cfg, a),
    }
}

/// A locked output directory plus what goes into its run manifest.
struct Session {
    dir: PathBuf,
    command: &'static str,
    started: f64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    _lock: DirLock,
}

impl Session {
    fn open(dir: &Path, command: &'static str) -> Result<Self> {
        let lock = DirLock::acquire(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            started: unix_now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            _lock: lock,
        })
    }

    fn finish(self, cli: &Cli, cfg: &RunConfig) -> Result<()> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_hash: config_hash(cfg),
            effective_config: serde_json::to_value(cfg)?,
            seed: cfg.train.seed,
            deterministic: cli.deterministic,
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix: self.started,
            finished_unix: unix_now(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        write_manifest(&self.dir, &manifest)
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| usage("--out is required"))
}

fn data_root(arg: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| cfg.data.root.clone())
        .ok_or_else(|| usage("a prepared dataset is required (--data or data.root)"))
}

fn prepare_data(cli: &Cli, mut cfg: RunConfig, a: &PrepareArgs) -> Result<()> {
    if let Some(e) = a.experiment {
        cfg.data.experiment = match e {
            ExperimentArg::One => Experiment::One,
            ExperimentArg::Two => Experiment::Two,
        };
    }
    if let Some(m) = a.materialize {
        cfg.data.materialize = match m {
            MaterializeArg::None => Materialize::None,
            MaterializeArg::Symlink => Materialize::Symlink,
            MaterializeArg::Copy => Materialize::Copy,
            MaterializeArg::Preprocess => Materialize::Preprocess,
        };
    }
    if a.attributes.is_some() {
        cfg.data.attributes = a.attributes.clone();
    }
    if a.images.is_some() {
        cfg.data.images = a.images.clone();
    }
    cfg.validate()?;
    if cfg.data.experiment == Experiment::Synthetic && cfg.data.domains.is_none() {
        return Err(usage(
            "prepare-data needs --experiment one|two (use synth-data for the synthetic corpus)",
        ));
    }
    let attributes = cfg
        .data
        .attributes
        .clone()
        .ok_or_else(|| usage("--attributes is required"))?;
    let spec = cfg.data.domain_spec();
    let index = load_attribute_index(&attributes)?;
    let sets = build_marginal_sets(&index, &spec)?;
    let violations = exclusion_violations(&index, &spec, &sets)?;
    let size = (cfg.data.materialize == Materialize::Preprocess).then_some(cfg.model.image_size);
    let manifest = dataset_manifest(
        "celeba",
        &spec,
        &sets,
        violations,
        cfg.data.materialize,
        size,
    );
    println!("{} images indexed", index.len());
    for name in &spec.domain_names {
        println!(
            "{name:<16} {:>8} ({} validation)",
            manifest.counts[name], manifest.validation_counts[name]
        );
    }
    println!("exclusion violations: {violations}");
    println!("content hash: {}", manifest.content_hash);
    if a.dry_run {
        return Ok(());
    }
    let out = out_dir(cli)?;
    let mut session = Session::open(out, "prepare-data")?;
    write_domain_datasets(out, &manifest, &sets, cfg.data.images.as_deref())?;
    session.inputs.push(attributes);
    session.inputs.extend(cfg.data.images.clone());
    session.outputs.push(out.join("manifest.json"));
    session.finish(cli, &cfg)
}

fn synth_data(cli: &Cli, mut cfg: RunConfig, a: &SynthArgs) -> Result<()> {
    if let Some(n) = a.per_domain {
        cfg.data.synthetic_per_domain = n;
    }
    if let Some(s) = a.size {
        cfg.data.synthetic_image_size = s;
    }
    cfg.validate()?;
    let spec = match cfg.data.experiment {
        Experiment::Synthetic => cfg.data.domain_spec(),
        _ => synthetic_domain_spec(),
    };
    let out = out_dir(cli)?;
    let mut session = Session::open(out, "synth-data")?;
    let domains = generate_synthetic_domains(
        &spec,
        cfg.data.synthetic_per_domain,
        cfg.data.synthetic_seed,
        cfg.data.synthetic_image_size,
    )?;
    let manifest = write_synthetic_dataset(out, &spec, &domains)?;
    for name in &spec.domain_names {
        println!("{name:<16} {:>8}", manifest.counts[name]);
    }
    println!("exclusion violations: {}", manifest.exclusion_violations);
    session.outputs.push(out.join("manifest.json"));
    session.outputs.push(out.join("labels.txt"));
    session.finish(cli, &cfg)
}

/// Loads the named domains of a prepared dataset, reading `members.txt`
/// against the raw image root when nothing was materialized.
fn load_domains(
    root: &Path,
    ds: &DatasetManifest,
    names: &[String],
    cfg: &RunConfig,
    validation: bool,
) -> Result<Vec<Vec<Tensor>>> {
    for n in names {
        if !ds.spec.domain_names.contains(n) {
            return Err(usage(format!(
                "domain {n:?} is not in the dataset (have {})",
                ds.spec.domain_names.join(", ")
            )));
        }
    }
    let size = cfg.model.image_size;
    if ds.materialize != Materialize::None {
        return Ok(load_domain_images(root, names, size, validation)?);
    }
    let images = cfg.data.images.as_deref().ok_or_else(|| {
        usage("dataset holds only member lists; set data.images to the raw image directory")
    })?;
    names
        .iter()
        .map(|n| {
            let list = root.join(n).join("members.txt");
            let text =
                fs::read_to_string(&list).with_context(|| format!("reading {}", list.display()))?;
            text.lines()
                .filter(|id| {
                    !id.is_empty() && latent_chain::dataset::is_validation(id) == validation
                })
                .map(|id| Ok(load_image(&images.join(id), size)?))
                .collect()
        })
        .collect()
}

fn domain_index(names: &[String], name: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n.eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            usage(format!(
                "unknown domain {name:?} (have {})",
                names.join(", ")
            ))
        })
}

fn train(cli: &Cli, mut cfg: RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(r) = a.regime {
        cfg.train.regime = match r {
            RegimeArg::Pair => Regime::Pair,
            RegimeArg::Joint => Regime::Joint,
            RegimeArg::WarmStart => Regime::WarmStartFinetune,
        };
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if a.data.is_some() {
        cfg.data.root = a.data.clone();
    }
    let root = data_root(&a.data, &cfg)?;
    let ds = DatasetManifest::load(&root)
        .with_context(|| format!("loading dataset manifest from {}", root.display()))?;
    let regime = cfg.train.regime;

    let (net, names, pairing, steps, transplant): (
        NetworkSet,
        Vec<String>,
        Pairing,
        usize,
        Option<TransplantRecord>,
    ) = match regime {
        Regime::Pair => {
            let [x, y] = a.pair.as_slice() else {
                return Err(usage(
                    "--pair needs exactly two domain names, e.g. --pair red,blue",
                ));
            };
            let names = vec![
                ds.spec.domain_names[domain_index(&ds.spec.domain_names, x)?].clone(),
                ds.spec.domain_names[domain_index(&ds.spec.domain_names, y)?].clone(),
            ];
            if names[0] == names[1] {
                return Err(usage("--pair needs two different domains"));
            }
            cfg.model.num_domains = 2;
            cfg.validate()?;
            let net = NetworkSet::new(cfg.model.clone(), cfg.train.seed)?;
            (net, names, Pairing::consecutive(2), cfg.train.steps, None)
        }
        Regime::Joint => {
            cfg.model.num_domains = ds.spec.num_domains();
            cfg.validate()?;
            let net = NetworkSet::new(cfg.model.clone(), cfg.train.seed)?;
            let pairing = Pairing(ds.spec.pairing.clone());
            (
                net,
                ds.spec.domain_names.clone(),
                pairing,
                cfg.train.steps,
                None,
            )
        }
        Regime::WarmStartFinetune => {
            let [p1, p2] = a.from.as_slice() else {
                return Err(usage("warm start needs --from <pair-one> <pair-two>"));
            };
            let c1 = Checkpoint::load(p1)?;
            let c2 = Checkpoint::load(p2)?;
            let net = warm_start_transplant(&c1.net, &c2.net, cfg.train.transplant_policy)?;
            cfg.model = net.config().clone();
            let steps = a
                .steps
                .unwrap_or_else(|| cfg.train_config().finetune_steps(c1.manifest.step));
            cfg.train.steps = steps;
            cfg.validate()?;
            let mut names = c1.manifest.domain_names.clone();
            names.extend(c2.manifest.domain_names.iter().cloned());
            let record = TransplantRecord {
                sources: [
                    c1.manifest.content_hash.clone(),
                    c2.manifest.content_hash.clone(),
                ],
                policy: cfg.train.transplant_policy,
            };
            let n = names.len();
            (net, names, Pairing::consecutive(n), steps, Some(record))
        }
    };
    let data = load_domains(&root, &ds, &names, &cfg, false)?;
    for (n, d) in names.iter().zip(&data) {
        println!("{n}: {} training images", d.len());
    }

    let out = out_dir(cli)?;
    let mut session = Session::open(out, "train")?;
    session.inputs.push(root.clone());
    session.inputs.extend(a.from.iter().cloned());
    let mut output = RunOutput::new(out, names.clone(), regime, cfg.train.checkpoint_every)?;
    output.transplant = transplant.clone();
    output.deterministic = cli.deterministic;
    let mut trainer = Trainer::new(net, pairing, cfg.train_config())?;
    trainer.run(&data, steps, Some(&output), |step, report| {
        let mut rec = report.to_record(step);
        if cli.deterministic {
            if let Some(m) = rec.as_object_mut() {
                m.remove("wall_clock");
            }
        }
        println!("{rec}");
    })?;
    let final_dir = out.join("final");
    Checkpoint::from_trainer(&trainer, names, regime, transplant).save(&final_dir)?;
    println!("checkpoint written to {}", final_dir.display());
    session.outputs.push(final_dir);
    session.outputs.push(output.metrics_path());
    session.finish(cli, &cfg)
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(domain_image_paths(p)?);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(usage("no input images found"));
    }
    Ok(out)
}

fn compose(cli: &Cli, cfg: RunConfig, a: &ComposeArgs) -> Result<()> {
    let dirs: Vec<&Path> = a.checkpoint.iter().map(PathBuf::as_path).collect();
    let loaded = load_translation_model(&dirs)?;
    let mut chain = parse_chain(&a.chain, &loaded.domain_names)?;
    chain.noise_enabled = a.noise;
    let files = expand_inputs(&a.inputs)?;
    let size = loaded.model.image_shape()[1];
    let images = files
        .iter()
        .map(|p| load_image(p, size))
        .collect::<Result<Vec<_>, _>>()?;
    let batch = Tensor::stack(&images)?;
    let trace = apply_chain_named(loaded.model.as_ref(), &chain, &batch, &loaded.domain_names)?;

    let grid = out_dir(cli)?;
    let parent = match grid.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut session = Session::open(&parent, "compose")?;
    render_grid(std::slice::from_ref(&trace), grid)?;
    session.outputs.push(grid.to_path_buf());
    if let Some(dir) = &a.save_intermediates {
        fs::create_dir_all(dir)?;
        for (file, item) in files.iter().zip(trace.split()) {
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            for (k, img) in item.images.iter().enumerate() {
                let p = dir.join(format!("{stem}.step{k}.png"));
                save_png(img, &p)?;
                session.outputs.push(p);
            }
        }
    }
    println!(
        "{} images through {} -> {}",
        files.len(),
        trace.step_labels[1..].join(", "),
        grid.display()
    );
    session.inputs.extend(a.checkpoint.iter().cloned());
    session.inputs.extend(files);
    session.finish(cli, &cfg)
}

fn evaluation_images(
    root: &Path,
    ds: &DatasetManifest,
    name: &str,
    cfg: &RunConfig,
) -> Result<Vec<Tensor>> {
    let names = [name.to_string()];
    let mut imgs = load_domains(root, ds, &names, cfg, true)?.remove(0);
    if imgs.is_empty() {
        imgs = load_domains(root, ds, &names, cfg, false)?.remove(0);
    }
    Ok(imgs)
}

fn parse_expected(tokens: &[String], labels: &[String]) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|t| {
            let t = t.trim();
            if let Ok(i) = t.parse::<usize>() {
                return Ok(i);
            }
            labels
                .iter()
                .position(|l| l.eq_ignore_ascii_case(t))
                .ok_or_else(|| usage(format!("unknown class {t:?} (have {})", labels.join(", "))))
        })
        .collect()
}

fn evaluate(cli: &Cli, mut cfg: RunConfig, a: &EvaluateArgs) -> Result<()> {
    if a.data.is_some() {
        cfg.data.root = a.data.clone();
    }
    let root = data_root(&a.data, &cfg)?;
    let ds = DatasetManifest::load(&root)
        .with_context(|| format!("loading dataset manifest from {}", root.display()))?;
    let dirs: Vec<&Path> = a.checkpoint.iter().map(PathBuf::as_path).collect();
    let loaded = load_translation_model(&dirs)?;
    cfg.model.image_size = loaded.model.image_shape()[1];
    let names = &loaded.domain_names;

    let report = match a.metric {
        MetricArg::Cycle => {
            let pairs: Vec<(usize, usize)> = match a.pair.as_slice() {
                [] => Pairing::consecutive(names.len()).0,
                [x, y] => vec![(domain_index(names, x)?, domain_index(names, y)?)],
                _ => return Err(usage("--pair needs exactly two domain names")),
            };
            let mut rows = Vec::new();
            for (i, j) in pairs {
                let imgs = evaluation_images(&root, &ds, &names[i], &cfg)?;
                let v =
                    cycle_consistency_metric(loaded.model.as_ref(), (i, j), &imgs, a.sample_size)?;
                println!("cycle {}>{}>{}: {v:?}", names[i], names[j], names[i]);
                rows.push(serde_json::json!({
                    "pair": [names[i], names[j]],
                    "translator": Translator::new(i, j).to_string(),
                    "n": a.sample_size.min(imgs.len()),
                    "value": v,
                }));
            }
            serde_json::json!({ "metric": "cycle", "results": rows })
        }
        MetricArg::Presence => {
            let text = a
                .chain
                .as_deref()
                .ok_or_else(|| usage("--chain is required for the presence metric"))?;
            let chain = parse_chain(text, names)?;
            let source = a
                .source
                .as_deref()
                .ok_or_else(|| usage("--source is required for the presence metric"))?;
            let source = &names[domain_index(names, source)?];
            let imgs = evaluation_images(&root, &ds, source, &cfg)?;
            let take = a.batch_size.min(imgs.len());
            if take == 0 {
                return Err(usage(format!("domain {source} has no images")));
            }
            let batch = Tensor::stack(&imgs[..take])?;
            let (classifier, labels): (Box<dyn ComboClassifier>, Vec<String>) = match &a.classifier
            {
                Some(dir) => {
                    let c = TrainedClassifier::load(dir)?;
                    let labels = c.manifest.label_map.clone();
                    (Box::new(c), labels)
                }
                None => (
                    Box::new(OracleClassifier { config: cfg.oracle }),
                    synthetic_combination_labels(),
                ),
            };
            let expected = parse_expected(&a.expected, &labels)?;
            if expected.len() != chain.steps.len() + 1 {
                return Err(usage(format!(
                    "--expected needs {} classes (original plus one per step), got {}",
                    chain.steps.len() + 1,
                    expected.len()
                )));
            }
            let r = presence_metric(
                loaded.model.as_ref(),
                classifier.as_ref(),
                &batch,
                &chain,
                &expected,
                &labels,
            )?;
            print!("{}", r.to_table());
            serde_json::to_value(&r)?
        }
    };
    if let Some(out) = &cli.out {
        let mut session = Session::open(out, "evaluate")?;
        let path = out.join("report.json");
        fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
        session.inputs.push(root);
        session.inputs.extend(a.checkpoint.iter().cloned());
        session.outputs.push(path);
        session.finish(cli, &cfg)?;
    }
    Ok(())
}

fn classifier(cli: &Cli, mut cfg: RunConfig, a: &ClassifierArgs) -> Result<()> {
    if a.attributes.is_some() {
        cfg.data.attributes = a.attributes.clone();
    }
    if a.images.is_some() {
        cfg.data.images = a.images.clone();
    }
    if a.data.is_some() {
        cfg.data.root = a.data.clone();
    }
    cfg.validate()?;
    let size = cfg.model.image_size;
    let mut inputs = Vec::new();
    let (examples, labels) =
        if let Some(attrs) = cfg.data.attributes.clone().filter(|_| a.data.is_none()) {
            let images = cfg
                .data
                .images
                .clone()
                .ok_or_else(|| usage("--images is required with --attributes"))?;
            let index = load_attribute_index(&attrs)?;
            let pos = |n: &str| {
                index
                    .attribute_position(n)
                    .ok_or_else(|| usage(format!("attribute {n} missing from {}", attrs.display())))
            };
            let (blond, brown, smiling) = (pos("Blond_Hair")?, pos("Brown_Hair")?, pos("Smiling")?);
            let mut examples: Vec<Vec<Tensor>> = vec![Vec::new(); 4];
            for (id, v) in &index.entries {
                let hair = match (v[blond], v[brown]) {
                    (true, false) => 0,
                    (false, true) => 1,
                    _ => continue,
                };
                let class = hair + if v[smiling] { 2 } else { 0 };
                if examples[class].len() < a.max_per_class {
                    examples[class].push(load_image(&images.join(id), size)?);
                }
            }
            inputs.extend([attrs, images]);
            (examples, celeba_combination_labels())
        } else {
            let root = data_root(&a.data, &cfg)?;
            let ds = DatasetManifest::load(&root)?;
            let table = read_synthetic_labels(&root)?;
            let mut examples: Vec<Vec<Tensor>> = vec![Vec::new(); ALL_COMBINATIONS.len()];
            for name in &ds.spec.domain_names {
                for p in domain_image_paths(&root.join(name))? {
                    let id = p.file_name().and_then(|f| f.to_str()).unwrap_or_default();
                    let Some(&(c, t, _)) = table.get(id) else {
                        continue;
                    };
                    let class = ALL_COMBINATIONS
                        .iter()
                        .position(|&k| k == (c, t))
                        .expect("known combination");
                    if examples[class].len() < a.max_per_class {
                        examples[class].push(load_image(&p, size)?);
                    }
                }
            }
            inputs.push(root);
            (examples, synthetic_combination_labels())
        };
    for (l, ex) in labels.iter().zip(&examples) {
        println!("{l:<24} {:>6} images", ex.len());
    }
    cfg.classifier.num_classes = labels.len();
    let out = out_dir(cli)?;
    let mut session = Session::open(out, "train-classifier")?;
    let trained = train_classifier(&examples, labels, &cfg.classifier)?;
    trained.save(out)?;
    println!(
        "train accuracy {:.4}  held-out accuracy {:.4}",
        trained.manifest.train_accuracy, trained.manifest.held_out_accuracy
    );
    session.inputs = inputs;
    session.outputs.push(out.join("classifier.bin"));
    session.outputs.push(out.join("manifest.json"));
    session.finish(cli, &cfg)
}
