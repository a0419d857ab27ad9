use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use compnn_core::compose::{
    correspondence_map, reconstruct as compose, semantic_correspondence, SemanticMember, Source,
};
use compnn_core::database::{global_descriptor, top_k_neighbors, TrainingDatabase};
use compnn_core::metrics::{quantize, ClassPalette, MetricReport};
use compnn_core::search::{exhaustive_search, hpm_run, NNField, SearchConfig};
use compnn_core::store::{
    ingest_with, read_field, read_png, read_tensor, write_field, write_png, IngestOptions, Manifest, PairSelection,
};
use compnn_core::tensor::{ActivationTensor, LayerSpec};
use compnn_core::{Error, Result};
use serde_json::{json, Value};

use crate::{
    EvaluateArgs, FilterArgs, IngestArgs, ReconstructArgs, SearchMode, SemanticArgs, SourceArg, VisualizeArgs,
};

pub fn ingest(args: IngestArgs) -> Result<Value> {
    let options = IngestOptions { layers: args.layers };
    let (_, report) = ingest_with(&args.manifest, &options)?;
    Ok(serde_json::to_value(report).expect("report serializes"))
}

/// Loads the database with only `layer` (and the descriptor) in memory.
fn load_layer(manifest: &Path, layer: &str) -> Result<(TrainingDatabase, LayerSpec)> {
    let options = IngestOptions {
        layers: Some(vec![layer.to_string()]),
    };
    let (db, _) = ingest_with(manifest, &options)?;
    let spec = db.layer(layer)?.clone();
    Ok((db, spec))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_json(value: &Value, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `--palette` if given, else the manifest's palette.
fn resolve_palette(explicit: Option<&Path>, manifest: Option<&Path>) -> Result<ClassPalette> {
    if let Some(path) = explicit {
        return ClassPalette::load(path);
    }
    if let Some(manifest_path) = manifest {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        if let Some(p) = Manifest::load(manifest_path)?.with_base_dir(base).palette {
            return ClassPalette::load(&p);
        }
    }
    Err(Error::Config(
        "RGB labels need a class palette: pass --palette or declare one in the manifest".into(),
    ))
}

fn candidate_ids(
    db: &TrainingDatabase,
    descriptor: Option<&[f32]>,
    top_k: usize,
    excluded: Option<u32>,
) -> Result<(Vec<u32>, &'static str)> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be ≥ 1".into()));
    }
    let keep = |id: &u32| Some(*id) != excluded;
    let (ids, ranking) = match (descriptor, db.descriptor_layer()) {
        (Some(d), Some(_)) => {
            let ranked = top_k_neighbors(db, d, top_k + usize::from(excluded.is_some()))?;
            (
                ranked.into_iter().filter(keep).take(top_k).collect::<Vec<_>>(),
                "descriptor",
            )
        }
        _ => (db.ids().into_iter().filter(keep).collect(), "all"),
    };
    if ids.is_empty() {
        return Err(Error::EmptySet("no candidate training pairs remain".into()));
    }
    Ok((ids, ranking))
}

fn search(
    query: &ActivationTensor,
    db: &TrainingDatabase,
    spec: &LayerSpec,
    args: &ReconstructArgs,
    candidates: Vec<u32>,
) -> Result<NNField> {
    match args.search {
        SearchMode::Oracle => exhaustive_search(query, db, spec, &candidates),
        SearchMode::Hpm => {
            let config = SearchConfig::new(candidates)
                .iterations(args.iterations)
                .seed(args.seed)
                .samples_per_cell(args.samples);
            hpm_run(query, db, spec, &config)
        }
    }
}

pub fn reconstruct(args: ReconstructArgs) -> Result<Value> {
    if args.top_k == 0 {
        return Err(Error::Config("top_k must be ≥ 1".into()));
    }
    if args.samples == 0 {
        return Err(Error::Config("samples must be ≥ 1".into()));
    }
    let palette = match &args.gt {
        Some(_) if args.source == SourceArg::Input => {
            return Err(Error::Config(
                "--gt scores the output reconstruction; use --source output or both".into(),
            ))
        }
        Some(_) => Some(resolve_palette(args.palette.as_deref(), Some(&args.manifest))?),
        None => None,
    };
    let (db, spec) = load_layer(&args.manifest, &args.layer)?;

    let (query, descriptor) = match (args.query_id, &args.query_tensor) {
        (Some(id), _) => {
            let pair = db.pair(id)?;
            (
                pair.tensor(&args.layer)?.clone(),
                Some(pair.global_descriptor().to_vec()),
            )
        }
        (None, Some(path)) => {
            let query = read_tensor(path)?.with_layer_name(args.layer.clone());
            let descriptor = match (&args.query_descriptor, db.descriptor_layer()) {
                (Some(p), Some(layer)) => Some(global_descriptor(&read_tensor(p)?.with_layer_name(layer), layer)?),
                _ => None,
            };
            (query, descriptor)
        }
        (None, None) => return Err(Error::Config("pass --query-id or --query-tensor".into())),
    };
    let excluded = if args.exclude_query { args.query_id } else { None };
    let (candidates, ranking) = candidate_ids(&db, descriptor.as_deref(), args.top_k, excluded)?;

    let start = Instant::now();
    let field = search(&query, &db, &spec, &args, candidates.clone())?;
    let search_ms = start.elapsed().as_secs_f64() * 1e3;

    create_dir(&args.out)?;
    let field_path = args.out.join("field.chpf");
    write_field(&field, &field_path)?;
    let sources: &[(Source, &str)] = match args.source {
        SourceArg::Input => &[(Source::Input, "input")],
        SourceArg::Output => &[(Source::Output, "output")],
        SourceArg::Both => &[(Source::Input, "input"), (Source::Output, "output")],
    };
    let mut images = serde_json::Map::new();
    let mut uncovered = 0;
    let mut output_image = None;
    for &(source, name) in sources {
        let recon = compose(&field, &db, &spec, source)?;
        let path = args.out.join(format!("{name}.png"));
        write_png(&recon.image, &path)?;
        uncovered = recon.uncovered_count();
        images.insert(name.into(), json!(path));
        if source == Source::Output {
            output_image = Some(recon.image);
        }
    }
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;

    let mut report = json!({
        "layer": spec.name,
        "search": match args.search { SearchMode::Oracle => "oracle", SearchMode::Hpm => "hpm" },
        "iterations": args.iterations,
        "seed": args.seed,
        "ranking": ranking,
        "candidates": candidates,
        "rows": field.rows,
        "cols": field.cols,
        "eval_count": field.eval_count,
        "search_ms": search_ms,
        "wall_time_ms": elapsed_ms,
        "uncovered_pixels": uncovered,
        "field": field_path,
        "images": images,
    });
    if let (Some(gt_path), Some(palette)) = (&args.gt, &palette) {
        let prediction = output_image.expect("output reconstruction was composed");
        let gt = read_png(gt_path, "ground truth")?;
        let metrics = serde_json::to_value(MetricReport::evaluate(&prediction, &gt, palette)?).expect("serializes");
        report["metrics"] = metrics;
    }
    write_json(&report, &args.out.join("report.json"))?;
    Ok(report)
}

pub fn evaluate(args: EvaluateArgs) -> Result<Value> {
    let palette = resolve_palette(args.palette.as_deref(), args.manifest.as_deref())?;
    let prediction = match (&args.recon, &args.field) {
        (Some(path), _) => read_png(path, "reconstruction")?,
        (None, Some(field_path)) => {
            let (manifest, layer) = match (&args.manifest, &args.layer) {
                (Some(m), Some(l)) => (m, l),
                _ => return Err(Error::Config("--field needs --manifest and --layer".into())),
            };
            let (db, spec) = load_layer(manifest, layer)?;
            let field = read_field(field_path, layer)?;
            compose(&field, &db, &spec, Source::Output)?.image
        }
        (None, None) => return Err(Error::Config("pass --recon or --field".into())),
    };
    let gt = read_png(&args.gt, "ground truth")?;
    let mut report = MetricReport::evaluate(&prediction, &gt, &palette)?;
    if let Some(path) = &args.baseline {
        let baseline = MetricReport::evaluate(&read_png(path, "baseline")?, &gt, &palette)?;
        report = report.with_baseline(&baseline);
    }
    Ok(serde_json::to_value(report).expect("report serializes"))
}

pub fn visualize(args: VisualizeArgs) -> Result<Value> {
    let (db, spec) = load_layer(&args.manifest, &args.layer)?;
    let field = read_field(&args.field, &args.layer)?;
    let query = read_png(&args.query_image, "query image")?;
    let map = correspondence_map(&field, &db, &spec, &query)?;

    create_dir(&args.out)?;
    let query_path = args.out.join("query.png");
    write_png(&map.query, &query_path)?;
    let mut sources = Vec::new();
    for (id, image) in &map.sources {
        let path = args.out.join(format!("source_{id}.png"));
        write_png(image, &path)?;
        sources.push(json!({ "image_id": id, "path": path }));
    }
    let legend = map.legend_json();
    let legend_path = args.out.join("legend.json");
    write_json(&legend, &legend_path)?;
    Ok(json!({
        "query": query_path,
        "sources": sources,
        "legend": legend,
        "legend_path": legend_path,
    }))
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn filter(args: FilterArgs) -> Result<Value> {
    let manifest_path = absolute(&args.manifest)?;
    let base = manifest_path.parent().unwrap_or(Path::new("/")).to_path_buf();
    let manifest = Manifest::load(&manifest_path)?.with_base_dir(&base);
    let selection = PairSelection {
        include: args.include,
        exclude: args.exclude,
        require_tags: args.tags,
        reject_tags: args.exclude_tags,
    };
    let (derived, mapping) = manifest.filtered(&selection)?;

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    derived.save(&args.out)?;
    let mapping_json: serde_json::Map<String, Value> = mapping
        .iter()
        .enumerate()
        .map(|(new, old)| (new.to_string(), json!(old)))
        .collect();
    let mut mapping_path = args.out.clone().into_os_string();
    mapping_path.push(".mapping.json");
    let mapping_path = PathBuf::from(mapping_path);
    write_json(&Value::Object(mapping_json.clone()), &mapping_path)?;
    Ok(json!({
        "manifest": args.out,
        "mapping_path": mapping_path,
        "pairs": derived.pairs.len(),
        "mapping": mapping_json,
    }))
}

fn class_index(palette: &ClassPalette, class: &str) -> Result<usize> {
    if let Some(i) = palette.index_of(class) {
        return Ok(i);
    }
    match class.parse::<usize>() {
        Ok(i) if i < palette.len() => Ok(i),
        _ => Err(Error::Config(format!("unknown class `{class}`"))),
    }
}

pub fn semantic(args: SemanticArgs) -> Result<Value> {
    let palette = resolve_palette(args.palette.as_deref(), Some(&args.manifest))?;
    let classes = args
        .classes
        .iter()
        .map(|c| class_index(&palette, c))
        .collect::<Result<Vec<_>>>()?;
    let (db, spec) = load_layer(&args.manifest, &args.layer)?;
    let (pa, pb) = (db.pair(args.a)?, db.pair(args.b)?);
    let labels_a = quantize(&read_png(&args.labels_a, "labels of A")?, &palette)?;
    let labels_b = quantize(&read_png(&args.labels_b, "labels of B")?, &palette)?;
    let a = SemanticMember {
        tensor: pa.tensor(&args.layer)?,
        image: &pa.input_image,
        labels: &labels_a,
    };
    let b = SemanticMember {
        tensor: pb.tensor(&args.layer)?,
        image: &pb.input_image,
        labels: &labels_b,
    };
    let config = SearchConfig::new(vec![0]).iterations(args.iterations).seed(args.seed);
    let result = semantic_correspondence(a, b, &spec, &palette, &classes, &config)?;

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_png(&result.side_by_side(), &args.out)?;
    Ok(json!({
        "image": args.out,
        "classes": classes.iter().map(|&c| palette.name(c)).collect::<Vec<_>>(),
        "rows": result.field.rows,
        "cols": result.field.cols,
    }))
}
