use std::collections::HashMap;
use std::path::{Path, PathBuf};

use meshmodes::acap::{read_feature_cache, write_feature_cache, FeatureCache};
use meshmodes::datagen::{gen_bar_dataset, write_dataset};
use meshmodes::editing::{probe_weight, read_constraints, ControlConstraint, Editor, FitOptions, LatentWeight};
use meshmodes::metrics::EvalReport;
use meshmodes::pipeline::{evaluate_shapes, reconstruct_shapes, select, Split};
use meshmodes::stacked::{
    component_similarity, extract_components, load_model, save_model, train_joint, ComponentMeta, StackedParams,
};
use meshmodes::{encode_dataset, load_obj, save_obj, AcapEncoder, AcapFeature, FeatureScaler, TriangleMesh};
use meshmodes_service::AppState;
use serde::Serialize;

use crate::config::{existing_dir, existing_file, output_dir, writable_file, RunConfig};
use crate::error::{CliError, CliResult};
use crate::{
    ComponentsArgs, ConfigArg, DataArgs, EditArgs, EncodeArgs, EvalArgs, GenArgs, ReconArgs, ReportFormat, ServeArgs,
    SplitArg, TrainArgs,
};

fn base(config: &ConfigArg) -> CliResult<RunConfig> {
    RunConfig::load(config.config.as_deref())
}

fn set<T>(field: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *field = v;
    }
}

fn with_data(cfg: &mut RunConfig, data: DataArgs) {
    set(&mut cfg.data, data.data.map(Some));
    set(&mut cfg.cache, data.cache.map(Some));
}

fn with_split(cfg: &mut RunConfig, split: SplitArg) -> CliResult<()> {
    set(&mut cfg.split, split.split);
    Ok(cfg.split.validate()?)
}

/// Meshes of every OBJ file in `dir`, sorted by file name.
fn load_objs(dir: &Path) -> CliResult<Vec<TriangleMesh>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
        .collect();
    paths.sort();
    paths.iter().map(|p| Ok(load_obj(p)?)).collect()
}

fn load_dataset(dir: &Path) -> CliResult<Vec<TriangleMesh>> {
    let meshes = load_objs(dir)?;
    if meshes.len() < 2 {
        return Err(CliError::data(format!("{} holds {} OBJ files, need at least 2", dir.display(), meshes.len())));
    }
    Ok(meshes)
}

/// Scaled features of `meshes`, from the cache when one is configured and
/// present, else freshly encoded against the first mesh.
fn dataset_features(meshes: &[TriangleMesh], cache: Option<&Path>) -> CliResult<FeatureCache> {
    match cache.filter(|p| p.exists()) {
        Some(path) => {
            let cache = read_feature_cache(path)?;
            check_cache(&cache, meshes, path)?;
            Ok(cache)
        }
        None => {
            let enc = encode_dataset(meshes, 0)?;
            Ok(FeatureCache { features: enc.features, scaler: enc.scaler })
        }
    }
}

fn check_cache(cache: &FeatureCache, meshes: &[TriangleMesh], path: &Path) -> CliResult<()> {
    let v = meshes[0].vertex_count();
    if cache.features.len() != meshes.len() || cache.features.iter().any(|f| f.vertex_count() != v) {
        return Err(CliError::data(format!(
            "cache {} holds {} shapes for a dataset of {} shapes with {v} vertices",
            path.display(),
            cache.features.len(),
            meshes.len()
        )));
    }
    Ok(())
}

/// Features of `meshes` in the model's scaled space. A cache is used only if
/// it was built with the model's scaler.
fn model_features(model: &StackedParams, meshes: &[TriangleMesh], cache: Option<&Path>) -> CliResult<Vec<AcapFeature>> {
    if let Some(path) = cache.filter(|p| p.exists()) {
        let cache = read_feature_cache(path)?;
        check_cache(&cache, meshes, path)?;
        if cache.scaler != model.scaler {
            return Err(CliError::data(format!("cache {} was not built for this checkpoint", path.display())));
        }
        return Ok(cache.features);
    }
    encode_with(&model.reference, &model.scaler, meshes)
}

fn encode_with(
    reference: &TriangleMesh,
    scaler: &FeatureScaler,
    meshes: &[TriangleMesh],
) -> CliResult<Vec<AcapFeature>> {
    let encoder = AcapEncoder::new(reference)?;
    meshes.iter().map(|m| Ok(scaler.forward(&encoder.encode_raw(m)?))).collect()
}

fn check_model_data(model: &StackedParams, meshes: &[TriangleMesh]) -> CliResult<()> {
    match meshes.iter().position(|m| m.faces != model.reference.faces) {
        Some(i) => Err(CliError::data(format!("shape {} does not share the checkpoint connectivity", meshes[i].name))),
        None => Ok(()),
    }
}

fn checkpoint(cfg: &RunConfig) -> CliResult<StackedParams> {
    let path = RunConfig::require(&cfg.checkpoint, "checkpoint")?;
    existing_file(path, "checkpoint")?;
    Ok(load_model(path)?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write_text(path, &serde_json::to_string_pretty(value).expect("plain data serializes"))
}

pub fn gen(args: GenArgs) -> CliResult<()> {
    let mut cfg = base(&args.config)?;
    set(&mut cfg.out, args.out.map(Some));
    set(&mut cfg.count, args.count);
    set(&mut cfg.bar.seed, args.seed);
    let out = RunConfig::require(&cfg.out, "out")?;
    cfg.bar.validate()?;
    let data = gen_bar_dataset(&cfg.bar, cfg.count)?;
    output_dir(out, "output directory")?;
    write_dataset(out, &cfg.bar, &data)?;
    eprintln!("wrote {} shapes with {} vertices to {}", data.meshes.len(), cfg.bar.vertex_count(), out.display());
    Ok(())
}

pub fn encode(args: EncodeArgs) -> CliResult<()> {
    let mut cfg = base(&args.config)?;
    with_data(&mut cfg, args.data);
    let data = RunConfig::require(&cfg.data, "data")?;
    let cache = RunConfig::require(&cfg.cache, "cache")?;
    existing_dir(data, "dataset")?;
    writable_file(cache, "cache")?;
    let meshes = load_dataset(data)?;
    let enc = encode_dataset(&meshes, 0)?;
    write_feature_cache(cache, &FeatureCache { features: enc.features, scaler: enc.scaler })?;
    eprintln!("encoded {} shapes into {}", meshes.len(), cache.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainMeta<'a> {
    config: &'a RunConfig,
    shapes: Vec<&'a str>,
    train: Vec<usize>,
    test: Vec<usize>,
    final_loss: Option<f64>,
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    let mut cfg = base(&args.config)?;
    with_data(&mut cfg, args.data);
    with_split(&mut cfg, args.split)?;
    set(&mut cfg.checkpoint, args.checkpoint.map(Some));
    set(&mut cfg.train.epochs, args.epochs);
    set(&mut cfg.train.seed, args.seed);
    cfg.train.validate()?;
    let data = RunConfig::require(&cfg.data, "data")?;
    let ckpt = RunConfig::require(&cfg.checkpoint, "checkpoint")?;
    let log = args.log.unwrap_or_else(|| ckpt.with_extension("csv"));
    let meta = ckpt.with_extension("json");
    existing_dir(data, "dataset")?;
    if let Some(cache) = cfg.cache.as_deref() {
        existing_file(cache, "cache")?;
    }
    for (path, what) in [(ckpt, "checkpoint"), (log.as_path(), "loss log"), (meta.as_path(), "metadata")] {
        writable_file(path, what)?;
    }

    let meshes = load_dataset(data)?;
    let Split { train, test } = cfg.split.partition(meshes.len())?;
    let enc = dataset_features(&meshes, cfg.cache.as_deref())?;
    let features = select(&enc.features, &train).map_err(CliError::from)?;
    let (model, history) = train_joint(&features, &meshes[0], &enc.scaler, &cfg.train)?;

    save_model(&model, ckpt)?;
    write_text(&log, &history.to_csv())?;
    write_json(
        &meta,
        &TrainMeta {
            config: &cfg,
            shapes: meshes.iter().map(|m| m.name.as_str()).collect(),
            train,
            test,
            final_loss: history.last().map(|e| e.total),
        },
    )?;
    eprintln!(
        "trained {} epochs on {} shapes; checkpoint {}, loss log {}",
        cfg.train.epochs,
        features.len(),
        ckpt.display(),
        log.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct IndexEntry {
    #[serde(flatten)]
    meta: ComponentMeta,
    region: Vec<usize>,
    file: Option<String>,
}

fn component_file(meta: &ComponentMeta) -> String {
    match meta.level {
        1 => format!("l1_k{:02}.obj", meta.index),
        _ => format!("l2_a{:02}_k{:02}.obj", meta.ae, meta.index),
    }
}

pub fn components(args: ComponentsArgs) -> CliResult<()> {
    let mut cfg = base(&args.config)?;
    set(&mut cfg.checkpoint, args.checkpoint.map(Some));
    set(&mut cfg.out, args.out.map(Some));
    let out = RunConfig::require(&cfg.out, "out")?.to_path_buf();
    let model = checkpoint(&cfg)?;
    output_dir(&out, "output directory")?;

    let set = extract_components(&model, &model.graph(), model.config.probe_level1, model.config.probe_level2);
    let editor = Editor::new(&model)?;
    let mut index = Vec::with_capacity(set.components.len());
    for c in &set.components {
        let meta = ComponentMeta::from(c);
        let file = if c.kept {
            let name = component_file(&meta);
            let mesh = editor.apply(&[probe_weight(c)])?.with_name(name.trim_end_matches(".obj").to_string());
            save_obj(&mesh, out.join(&name))?;
            Some(name)
        } else {
            None
        };
        index.push(IndexEntry { meta, region: c.region(), file });
    }
    write_json(&out.join("index.json"), &index)?;

    let sim = component_similarity(&set);
    let mut csv = String::from("component");
    for k in 0..sim.len() {
        csv.push_str(&format!(",k{k:02}"));
    }
    csv.push('\n');
    for (k, row) in sim.iter().enumerate() {
        csv.push_str(&format!("k{k:02}"));
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write_text(&out.join("similarity.csv"), &csv)?;

    let kept2 = set.kept().filter(|c| c.level == 2).count();
    eprintln!(
        "{} raw components, {} kept ({} at level 2), {} pruned; written to {}",
        set.components.len(),
        set.components.len() - set.pruned_count(),
        kept2,
        set.pruned_count(),
        out.display()
    );
    Ok(())
}

pub fn recon(args: ReconArgs) -> CliResult<()> {
    let mut cfg = base(&args.config)?;
    with_data(&mut cfg, args.data);
    with_split(&mut cfg, args.split)?;
    set(&mut cfg.checkpoint, args.checkpoint.map(Some));
    set(&mut cfg.out, args.out.map(Some));
    let data = RunConfig::require(&cfg.data, "data")?;
    let out = RunConfig::require(&cfg.out, "out")?;
    existing_dir(data, "dataset")?;
    let model = checkpoint(&cfg)?;
    let meshes = load_dataset(data)?;
    check_model_data(&model, &meshes)?;
    let test = cfg.split.partition(meshes.len())?.test;
    let ground = select(&meshes, &test)?;
    let features = model_features(&model, &ground, None)?;
    output_dir(out, "output directory")?;
    let recon = reconstruct_shapes(&model, &features)?;
    for (r, g) in recon.into_iter().zip(&ground) {
        save_obj(&r.mesh.with_name(g.name.clone()), out.join(format!("{}.obj", g.name)))?;
    }
    eprintln!("reconstructed {} held-out shapes into {}", ground.len(), out.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let mut cfg = base(&args.config)?;
    with_data(&mut cfg, args.data);
    with_split(&mut cfg, args.split)?;
    set(&mut cfg.checkpoint, args.checkpoint.map(Some));
    let data = RunConfig::require(&cfg.data, "data")?;
    existing_dir(data, "dataset")?;
    if let Some(dir) = &args.recon {
        existing_dir(dir, "reconstruction directory")?;
    }
    if let Some(out) = &args.out {
        writable_file(out, "report")?;
    }
    let meshes = load_dataset(data)?;

    let report = match &args.recon {
        Some(dir) => eval_directory(&cfg, &meshes, dir)?,
        None => {
            let model = checkpoint(&cfg)?;
            check_model_data(&model, &meshes)?;
            let features = model_features(&model, &meshes, cfg.cache.as_deref())?;
            let test = cfg.split.partition(meshes.len())?.test;
            evaluate_shapes(&model, &meshes, &features, &test)?
        }
    };
    match args.format {
        ReportFormat::Table => print!("{}", report.to_table()),
        ReportFormat::Json => println!("{}", report.to_json()),
    }
    if let Some(out) = &args.out {
        write_text(out, &report.to_json())?;
    }
    Ok(())
}

/// Compares every OBJ in `dir` with the data shape of the same name. Both
/// sides are encoded against the same reference and scaler: the checkpoint's
/// when one is configured, else the dataset's own.
fn eval_directory(cfg: &RunConfig, meshes: &[TriangleMesh], dir: &Path) -> CliResult<EvalReport> {
    let recon = load_objs(dir)?;
    if recon.is_empty() {
        return Err(CliError::data(format!("{} holds no OBJ files", dir.display())));
    }
    let by_name: HashMap<&str, &TriangleMesh> = meshes.iter().map(|m| (m.name.as_str(), m)).collect();
    let ground: Vec<TriangleMesh> = recon
        .iter()
        .map(|r| {
            by_name
                .get(r.name.as_str())
                .map(|&g| g.clone())
                .ok_or_else(|| CliError::data(format!("no data shape named {} for {}", r.name, dir.display())))
        })
        .collect::<CliResult<_>>()?;

    let (reference, scaler) = match cfg.checkpoint.as_deref() {
        Some(_) => {
            let model = checkpoint(cfg)?;
            (model.reference, model.scaler)
        }
        None => {
            let enc = dataset_features(meshes, cfg.cache.as_deref())?;
            (meshes[0].clone(), enc.scaler)
        }
    };
    let x = encode_with(&reference, &scaler, &ground)?;
    let xhat = encode_with(&reference, &scaler, &recon)?;
    Ok(EvalReport::compute(&ground, &recon, &x, &xhat)?)
}

#[derive(Serialize)]
struct EditReport {
    weights: Vec<LatentWeight>,
    residual: Option<f64>,
    objective: Option<f64>,
    iterations: Option<usize>,
    skipped: Vec<usize>,
    aborted: bool,
}

pub fn edit(args: EditArgs) -> CliResult<()> {
    let mut cfg = base(&args.config)?;
    set(&mut cfg.checkpoint, args.checkpoint.map(Some));
    set(&mut cfg.out, args.out.map(Some));
    let out = RunConfig::require(&cfg.out, "out")?;
    writable_file(out, "output mesh")?;
    let input = args.constraints.as_deref().or(args.weights.as_deref()).expect("clap requires one input");
    existing_file(input, "input")?;
    let model = checkpoint(&cfg)?;
    let editor = Editor::new(&model)?;

    let (mesh, report) = if let Some(path) = &args.constraints {
        let constraints: Vec<ControlConstraint> = read_constraints(path)?;
        let sol = editor.fit(&constraints, &FitOptions::default())?;
        let report = EditReport {
            weights: sol.weights(),
            residual: Some(sol.residual),
            objective: Some(sol.objective),
            iterations: Some(sol.iterations),
            skipped: sol.skipped.clone(),
            aborted: sol.aborted,
        };
        (sol.mesh, report)
    } else {
        let text = std::fs::read_to_string(input).map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
        let weights: Vec<LatentWeight> =
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
        let mesh = editor.apply(&weights)?;
        (
            mesh,
            EditReport { weights, residual: None, objective: None, iterations: None, skipped: vec![], aborted: false },
        )
    };
    let name = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    save_obj(&mesh.with_name(name), out)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    if report.aborted {
        return Err(CliError::Numerical("fit stopped at the last finite iterate".into()));
    }
    Ok(())
}

pub fn serve(args: ServeArgs) -> CliResult<()> {
    let mut cfg = base(&args.config)?;
    set(&mut cfg.checkpoint, args.checkpoint.map(Some));
    set(&mut cfg.port, args.port);
    let state = match cfg.checkpoint.as_deref() {
        Some(path) => {
            existing_file(path, "checkpoint")?;
            AppState::from_checkpoint(path)?
        }
        None => {
            eprintln!("no checkpoint given; every endpoint will answer 503");
            AppState::empty()
        }
    };
    let addr = std::net::SocketAddr::new(args.host, cfg.port);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::data(format!("cannot start runtime: {e}")))?;
    eprintln!("listening on http://{addr}");
    runtime
        .block_on(meshmodes_service::serve(state, addr))
        .map_err(|e| CliError::data(format!("cannot serve on {addr}: {e}")))
}
