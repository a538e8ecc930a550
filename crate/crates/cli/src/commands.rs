use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use homoscale::estimator::{
    direct_optimize, estimate_chain, estimate_with_truth, progressive_estimate, Diagnostics, ProgressiveOptions,
    TracePoint,
};
use homoscale::evaluation::{
    category_report, curves_to_svg, default_thresholds, inlier_curve, pme, records_to_csv, Category, ReportTable,
    RobustnessCurve,
};
use homoscale::homography::{compose_chain, HomographyJson};
use homoscale::manifest::{
    manifest_warnings, parse_chain_file, parse_manifest, recorded, write_atomic, write_manifest, ChainFile,
    DatasetRecord,
};
use homoscale::objective::{ChainContext, ChainParams};
use homoscale::synthesis::{build_chain, derive_seed, labelled_points, procedural_texture, ProgressiveChain};
use homoscale::{Correspondences, Error, Homography, Image, MeshGrid, Result, ValidityMask};

use crate::{resolve_against, Command, Outcome, RunConfig};

/// Anchor matches kept per pair by `train`.
const ANCHORS_PER_PAIR: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub code: String,
    pub message: String,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        ErrorRecord {
            code: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

/// Per-pair output of `estimate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub pair_id: String,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<HomographyJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pme: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorRecord>,
}

/// Per-chain output of `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub pair_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorRecord>,
    pub iterations: usize,
    pub converged: bool,
    pub consistency_residual: f64,
    /// Estimator pairs that fell back to the identity at initialisation.
    pub init_failures: usize,
    pub pme_init: f64,
    /// PME of `bridge_n ∘ hops`.
    pub pme_composed: f64,
    /// PME of the directly optimized source→target homography.
    pub pme_st: f64,
    pub hops: Vec<HomographyJson>,
    pub bridges: Vec<HomographyJson>,
    pub st: Option<HomographyJson>,
    pub composed: Option<HomographyJson>,
}

/// File name for a pair id: anything outside `[A-Za-z0-9._-]` becomes `_`.
pub fn pair_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

pub(crate) fn dispatch(cfg: &RunConfig) -> Result<Outcome> {
    match &cfg.command {
        Command::Gen { count, source } => gen(cfg, *count, source.as_deref()),
        Command::Estimate { manifest, progressive } => estimate_cmd(cfg, manifest, *progressive),
        Command::Train { manifest, log } => train_cmd(cfg, manifest, *log),
        Command::Eval {
            manifest,
            estimates,
            method,
        } => eval_cmd(cfg, manifest, estimates.as_deref(), method.as_deref()),
        Command::Plot { input } => plot_cmd(cfg, input),
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn write_json<T: Serialize>(path: &Path, v: &T, out: &mut Outcome) -> Result<()> {
    write_atomic(path, &to_json(v)?)?;
    out.artifacts.push(path.to_path_buf());
    Ok(())
}

fn write_text(path: &Path, text: &str, out: &mut Outcome) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    out.artifacts.push(path.to_path_buf());
    Ok(())
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    match manifest.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_manifest(path: &Path, out: &mut Outcome) -> Result<Vec<DatasetRecord>> {
    let records = parse_manifest(path)?;
    out.log.extend(manifest_warnings(&records).into_iter().map(|w| format!("warning: {w}")));
    Ok(records)
}

// ---- gen ----

fn gen(cfg: &RunConfig, count: usize, source: Option<&Path>) -> Result<Outcome> {
    let mut out = Outcome::default();
    let source = source.map(Image::load).transpose()?;
    fs::create_dir_all(&cfg.out)?;
    let made = (0..count)
        .into_par_iter()
        .map(|k| gen_one(cfg, k, source.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(count);
    for (record, files) in made {
        records.push(record);
        out.artifacts.extend(files);
    }
    let manifest = cfg.out.join("manifest.json");
    write_manifest(&manifest, &records)?;
    out.artifacts.push(manifest);
    write_json(&cfg.out.join("config.json"), cfg, &mut out)?;
    out.log.push(format!("generated {count} chains in {}", cfg.out.display()));
    Ok(out)
}

fn gen_one(cfg: &RunConfig, k: usize, source: Option<&Image>) -> Result<(DatasetRecord, Vec<PathBuf>)> {
    let c = &cfg.chain;
    let seed = derive_seed(cfg.seed, k as u64);
    let texture;
    let source = match source {
        Some(s) => s,
        None => {
            texture = procedural_texture(c.crop_width * 4 / 3, c.crop_height * 3 / 2, seed)?;
            &texture
        }
    };
    let chain = build_chain(source, None, c, seed)?;
    let h_st = chain.h_st.ok_or_else(|| Error::Validation("generated chain has no ground truth".into()))?;
    let bridges = chain
        .bridge_truths()?
        .ok_or_else(|| Error::Validation("generated chain has no ground truth".into()))?;

    let id = format!("chain_{k:04}");
    let dir = cfg.out.join(&id);
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    let mut images = Vec::new();
    for (i, img) in chain.images.iter().enumerate() {
        let name = PathBuf::from(format!("s{i}.png"));
        img.save_png(&dir.join(&name))?;
        files.push(dir.join(&name));
        images.push(name);
    }
    chain.target.save_png(&dir.join("t.png"))?;
    files.push(dir.join("t.png"));

    let file = ChainFile {
        seed,
        n: chain.n(),
        crop_origin: chain.crop_origin,
        width: c.crop_width,
        height: c.crop_height,
        images,
        target: "t.png".into(),
        hops: chain.hops.iter().map(HomographyJson::from).collect(),
        bridges: bridges.iter().map(HomographyJson::from).collect(),
        h_st: HomographyJson::from(&h_st),
        non_overlap_rate: homoscale::imaging::non_overlap_rate(&h_st, c.crop_width, c.crop_height)?,
    };
    let chain_path = dir.join("chain.json");
    write_atomic(&chain_path, &to_json(&file)?)?;
    files.push(chain_path);

    // labels come from the matrix exactly as a reader will parse it
    let points = labelled_points(&recorded(&h_st)?, c.crop_width, c.crop_height)?;
    if points.len() < homoscale::manifest::MIN_POINTS {
        return Err(Error::Validation(format!("{id}: only {} labelled points stay in frame", points.len())));
    }
    let id_path = PathBuf::from(&id);
    let record = DatasetRecord {
        id: Some(id),
        source: id_path.join("s0.png"),
        target: id_path.join("t.png"),
        points: points.to_tuples(),
        category: Category::Synthetic,
        homography: Some(HomographyJson::from(&h_st)),
        chain: Some(id_path.join("chain.json")),
    };
    Ok((record, files))
}

/// Loads a chain file and its images.
pub(crate) fn load_chain(path: &Path) -> Result<(ChainFile, ProgressiveChain)> {
    let file = parse_chain_file(path)?;
    let dir = manifest_dir(path);
    let images = file
        .images
        .iter()
        .map(|p| Image::load(&resolve_against(&dir, p)))
        .collect::<Result<Vec<_>>>()?;
    let target = Image::load(&resolve_against(&dir, &file.target))?;
    for img in images.iter().chain(std::iter::once(&target)) {
        if img.width() != file.width || img.height() != file.height {
            return Err(Error::ShapeMismatch(format!(
                "{}: image is {}x{}, chain declares {}x{}",
                path.display(),
                img.width(),
                img.height(),
                file.width,
                file.height
            )));
        }
    }
    let chain = ProgressiveChain {
        masks: images.iter().map(|i| ValidityMask::all_valid(i.width(), i.height())).collect(),
        images,
        target,
        target_mask: None,
        hops: file.hop_homographies()?,
        h_st: Some(file.st_homography()?),
        crop_origin: file.crop_origin,
    };
    Ok((file, chain))
}

// ---- estimate ----

fn estimate_cmd(cfg: &RunConfig, manifest: &Path, progressive: bool) -> Result<Outcome> {
    let mut out = Outcome::default();
    let records = load_manifest(manifest, &mut out)?;
    let base = manifest_dir(manifest);
    let results = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| estimate_one(cfg, &base, i, r, progressive))
        .collect::<Result<Vec<_>>>()?;

    let dir = cfg.out.join("estimates");
    fs::create_dir_all(&dir)?;
    let mut csv = String::from("pair_id,category,pme,status\n");
    let mut failed = 0;
    for r in &results {
        write_json(&dir.join(pair_file_name(&r.pair_id)), r, &mut out)?;
        let status = match &r.error {
            Some(e) => {
                failed += 1;
                out.log.push(format!("warning: {}: {} {}", r.pair_id, e.code, e.message));
                e.code.as_str()
            }
            None => "ok",
        };
        let pme = r.pme.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{pme},{status}", r.pair_id, r.category.label());
    }
    write_text(&cfg.out.join("estimates.csv"), &csv, &mut out)?;
    write_json(&cfg.out.join("config.json"), cfg, &mut out)?;
    out.log.push(format!(
        "estimated {} of {} pairs into {}",
        results.len() - failed,
        results.len(),
        cfg.out.display()
    ));
    Ok(out)
}

fn estimate_one(
    cfg: &RunConfig,
    base: &Path,
    index: usize,
    r: &DatasetRecord,
    progressive: bool,
) -> Result<EstimateRecord> {
    let pair_id = r.pair_id(index);
    let pts = r.correspondences()?;
    let estimated = if progressive {
        let chain_path = r
            .chain
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("{pair_id}: progressive estimation needs a chain file")))?;
        let (_, chain) = load_chain(&resolve_against(base, chain_path))?;
        progressive_estimate(&chain, &cfg.estimator, &ProgressiveOptions::default()).map(|p| (p.h_st, p.diagnostics))
    } else {
        let src = Image::load(&resolve_against(base, &r.source))?;
        let tgt = Image::load(&resolve_against(base, &r.target))?;
        estimate_with_truth(&src, &tgt, &cfg.estimator, Some(&pts)).map(|e| (e.homography, vec![e.diagnostics]))
    };
    let mut rec = EstimateRecord {
        pair_id,
        category: r.category,
        homography: None,
        pme: None,
        diagnostics: Vec::new(),
        error: None,
    };
    match estimated.and_then(|(h, d)| Ok((h, d, pme(&h, &pts)?.pme))) {
        Ok((h, d, p)) => {
            rec.homography = Some(HomographyJson::from(&h));
            rec.pme = Some(p);
            rec.diagnostics = d;
        }
        Err(e) => rec.error = Some(ErrorRecord::from(&e)),
    }
    Ok(rec)
}

// ---- train ----

fn train_cmd(cfg: &RunConfig, manifest: &Path, log: bool) -> Result<Outcome> {
    let mut out = Outcome::default();
    let records = load_manifest(manifest, &mut out)?;
    let base = manifest_dir(manifest);
    let jobs: Vec<(String, PathBuf, Correspondences)> = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.chain.as_ref().map(|c| (i, r, c)))
        .map(|(i, r, c)| Ok((r.pair_id(i), resolve_against(&base, c), r.correspondences()?)))
        .collect::<Result<_>>()?;
    if jobs.is_empty() {
        return Err(Error::EmptyInput(format!("{} lists no chain files", manifest.display())));
    }
    let results = jobs
        .par_iter()
        .map(|(id, path, pts)| train_one(cfg, id, path, pts))
        .collect::<Result<Vec<_>>>()?;

    let mut summary = String::from("pair_id,iterations,converged,consistency_residual,pme_init,pme_composed,pme_st,status\n");
    for (rec, trace) in &results {
        let dir = cfg.out.join("train").join(pair_file_name(&rec.pair_id).trim_end_matches(".json"));
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("result.json"), rec, &mut out)?;
        let mut csv = String::from("iteration,l_sup,l_unsup,lambda_w,l_hil,anchor,total,consistency\n");
        for t in trace {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{}",
                t.iteration, t.l_sup, t.l_unsup, t.lambda_w, t.l_hil, t.anchor, t.total, t.consistency
            );
        }
        write_text(&dir.join("trace.csv"), &csv, &mut out)?;
        if log {
            let mut lines = String::new();
            for t in trace {
                lines.push_str(&serde_json::to_string(t).map_err(|e| Error::Io(e.to_string()))?);
                lines.push('\n');
            }
            write_text(&dir.join("trace.jsonl"), &lines, &mut out)?;
        }
        let status = match &rec.error {
            Some(e) => {
                out.log.push(format!("warning: {}: {} {}", rec.pair_id, e.code, e.message));
                e.code.as_str()
            }
            None => "ok",
        };
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{status}",
            rec.pair_id,
            rec.iterations,
            rec.converged,
            rec.consistency_residual,
            rec.pme_init,
            rec.pme_composed,
            rec.pme_st
        );
    }
    write_text(&cfg.out.join("train.csv"), &summary, &mut out)?;
    write_json(&cfg.out.join("config.json"), cfg, &mut out)?;
    out.log.push(format!("optimized {} chains into {}", results.len(), cfg.out.display()));
    Ok(out)
}

fn train_one(cfg: &RunConfig, id: &str, path: &Path, pts: &Correspondences) -> Result<(TrainRecord, Vec<TracePoint>)> {
    let (file, chain) = load_chain(path)?;
    let grid = MeshGrid::new(file.width, file.height)?;
    let resized = MeshGrid::new(cfg.chain.resize_width, cfg.chain.resize_height)?;
    let mut rec = TrainRecord {
        pair_id: id.to_string(),
        error: None,
        iterations: 0,
        converged: false,
        consistency_residual: f64::NAN,
        init_failures: 0,
        pme_init: f64::NAN,
        pme_composed: f64::NAN,
        pme_st: f64::NAN,
        hops: Vec::new(),
        bridges: Vec::new(),
        st: None,
        composed: None,
    };
    let run = || -> Result<_> {
        let ctx = ChainContext::new(&chain.hops, grid, resized)?;
        let keep = if cfg.optimizer.mu > 0.0 { ANCHORS_PER_PAIR } else { 1 };
        let est = estimate_chain(&chain, &cfg.estimator, keep)?;
        let init = ChainParams::from_homographies(&est.hops, &est.bridges, &est.st, grid)?;
        let init_composed = init
            .bridge_homographies(grid)?
            .last()
            .copied()
            .unwrap_or_else(Homography::identity)
            .compose(&compose_chain(&init.hop_homographies(grid)?)?)?;
        let anchors = (cfg.optimizer.mu > 0.0).then_some(&est.anchors);
        let res = direct_optimize(&ctx, &init, anchors, &cfg.optimizer, &cfg.loss)?;
        Ok((est.failures, pme(&init_composed, pts)?.pme, res))
    };
    match run() {
        Ok((failures, p0, res)) => {
            rec.iterations = res.iterations;
            rec.converged = res.converged;
            rec.consistency_residual = res.consistency_residual;
            rec.init_failures = failures;
            rec.pme_init = p0;
            rec.pme_composed = pme(&res.composed, pts)?.pme;
            rec.pme_st = pme(&res.st, pts)?.pme;
            rec.hops = res.hops.iter().map(HomographyJson::from).collect();
            rec.bridges = res.bridges.iter().map(HomographyJson::from).collect();
            rec.st = Some(HomographyJson::from(&res.st));
            rec.composed = Some(HomographyJson::from(&res.composed));
            Ok((rec, res.trace))
        }
        Err(e @ (Error::MissingFile(_) | Error::Parse { .. } | Error::Io(_))) => Err(e),
        Err(e) => {
            rec.error = Some(ErrorRecord::from(&e));
            Ok((rec, Vec::new()))
        }
    }
}

// ---- eval ----

fn eval_cmd(cfg: &RunConfig, manifest: &Path, estimates: Option<&Path>, method: Option<&str>) -> Result<Outcome> {
    let mut out = Outcome::default();
    let records = load_manifest(manifest, &mut out)?;
    if records.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no records", manifest.display())));
    }
    let method = method.unwrap_or(if estimates.is_some() { "estimate" } else { "ground-truth" });
    let mut evals = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let id = r.pair_id(i);
        let h = match estimates {
            Some(dir) => {
                let path = dir.join("estimates").join(pair_file_name(&id));
                if !path.exists() {
                    return Err(Error::MissingFile(path.display().to_string()));
                }
                let rec: EstimateRecord = serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::Parse {
                    context: format!("{}:{}:{}", path.display(), e.line(), e.column()),
                    message: e.to_string(),
                })?;
                match rec.homography {
                    Some(j) => Homography::try_from(&j)?,
                    None => {
                        out.log.push(format!("warning: {id}: no estimate, scoring the identity"));
                        Homography::identity()
                    }
                }
            }
            None => r
                .ground_truth()?
                .ok_or_else(|| Error::Validation(format!("record {i} ({id}) has no recorded homography")))?,
        };
        evals.push(pme(&h, &r.correspondences()?)?.with_id(id, r.category));
    }
    let errors: Vec<f64> = evals.iter().map(|e| e.pme).collect();
    let curve = inlier_curve(&errors, &default_thresholds())?;
    let table = ReportTable::new(vec![category_report(method, &evals)]);
    fs::create_dir_all(&cfg.out)?;
    write_text(&cfg.out.join("records.csv"), &records_to_csv(&evals)?, &mut out)?;
    write_text(&cfg.out.join("report.csv"), &table.to_csv()?, &mut out)?;
    write_text(&cfg.out.join("report.txt"), &table.to_text(), &mut out)?;
    write_text(&cfg.out.join("curve.csv"), &curve.to_csv(), &mut out)?;
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    out.log.push(format!("{method}: mean PME {mean:.4} over {} pairs", evals.len()));
    Ok(out)
}

// ---- plot ----

fn plot_cmd(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<Outcome> {
    let mut out = Outcome::default();
    let mut curves = Vec::with_capacity(inputs.len());
    for p in inputs {
        if !p.exists() {
            return Err(Error::MissingFile(p.display().to_string()));
        }
        let curve = RobustnessCurve::from_csv(&fs::read_to_string(p)?).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                context: p.display().to_string(),
                message,
            },
            other => other,
        })?;
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        // `eval` always writes curve.csv, so its directory names the method
        let label = match p.parent().and_then(|d| d.file_name()) {
            Some(d) if stem == "curve" => d.to_string_lossy().into_owned(),
            _ => stem,
        };
        curves.push((label, curve));
    }
    let target = if cfg.out.extension().is_some_and(|e| e == "svg") {
        cfg.out.clone()
    } else {
        cfg.out.join("robustness.svg")
    };
    write_text(&target, &curves_to_svg(&curves), &mut out)?;
    out.log.push(format!("plotted {} curves to {}", curves.len(), target.display()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_file_names_are_safe() {
        assert_eq!(pair_file_name("chain_0001"), "chain_0001.json");
        assert_eq!(pair_file_name("a/b c"), "a_b_c.json");
    }

    #[test]
    fn error_records_carry_codes() {
        let r = ErrorRecord::from(&Error::NoMatches(2));
        assert_eq!(r.code, "E_NO_MATCHES");
        assert!(r.message.contains('2'));
    }
}
