use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use gmp::encoding::{encode_entity, encode_entity_bytes, write_entity, AppearanceMap, KernelParams};
use gmp::eval::{average_reports, cmc_csv, cmc_svg, evaluate_protocol, summary_csv, EvalConfig, EvalReport, EvalSplit, ReduceChoice};
use gmp::model::{load_model, save_model, sha256_hex};
use gmp::synthgen::{generate, SynthData, SynthSpec};
use gmp::training::{sample_groups, train as train_model, training_accuracy, TrainConfig, TrainMode, TrainingSet};
use gmp::vocab::{fit_kmeans, quantize, sample_training_features, Vocabulary};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{
    count_views, digest_tree, list_raw_entities, load_dataset, load_features, read_labels, view_dir, write_labels,
    ImagePrep, LabelRow, LABELS_FILE,
};
use crate::error::CliError;
use crate::{BuildVocabArgs, EncodeArgs, EvalArgs, ImageArgs, KernelArgs, SynthArgs, TrainArgs};

/// Kernel settings recorded next to encoded data.
const ENCODING_FILE: &str = "encoding.json";

type CmdResult = Result<(), CliError>;

fn create_dir(p: &Path) -> CmdResult {
    std::fs::create_dir_all(p).map_err(|e| CliError::data(format!("cannot create {}: {e}", p.display())))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    std::fs::write(p, bytes).map_err(|e| CliError::data(format!("cannot write {}: {e}", p.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn kernel_of(k: &KernelArgs) -> Result<KernelParams<f64>, CliError> {
    Ok(KernelParams::new(k.sigma, k.alpha, k.stride)?)
}

fn prep_of(i: &ImageArgs) -> Result<ImagePrep, CliError> {
    if i.width < 2 || i.height < 2 || i.patch == 0 || i.patch > i.width.min(i.height) {
        return Err(CliError::usage("image size must be >= 2 and hold at least one patch"));
    }
    Ok(ImagePrep {
        width: i.width,
        height: i.height,
        patch: i.patch,
    })
}

fn vocab_path(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("vocab_view_{view}.json"))
}

pub fn build_vocab(a: &BuildVocabArgs) -> CmdResult {
    let prep = prep_of(&a.image)?;
    let n_views = match a.views {
        Some(n) => n,
        None => count_views(&a.input)?,
    };
    if a.k == 0 || a.samples == 0 {
        return Err(CliError::usage("--k and --samples must be positive"));
    }
    create_dir(&a.out)?;
    for m in 0..n_views {
        let mut fields = Vec::new();
        for (_, files) in list_raw_entities(&a.input, m)? {
            for f in files {
                fields.push(load_features(&f, prep)?);
            }
        }
        let dim = fields[0].dim();
        if fields.iter().any(|f| f.dim() != dim) {
            return Err(CliError::data(format!("view {m} mixes feature dimensions")));
        }
        let samples = sample_training_features(&fields, a.samples, a.seed.wrapping_add(m as u64))?;
        let mut fit = fit_kmeans(&samples, a.k, a.seed, a.max_iter)?;
        fit.vocab.view = m as u32;
        write_file(&vocab_path(&a.out, m), to_json(&fit.vocab))?;
        write_file(&a.out.join(format!("vocab_view_{m}.csv")), fit.vocab.to_csv())?;
        println!(
            "view {m}: {} words, dim {dim}, {} features from {} images, inertia {:.6e}{}",
            fit.vocab.k,
            samples.len(),
            fields.len(),
            fit.inertia.last().copied().unwrap_or(0.0),
            if fit.converged { "" } else { " (iteration cap reached)" }
        );
    }
    Ok(())
}

fn read_vocab(dir: &Path, view: usize) -> Result<Vocabulary, CliError> {
    let p = vocab_path(dir, view);
    if !p.is_file() {
        return Err(CliError::usage(format!("vocabulary {} not found", p.display())));
    }
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
    let v: Vocabulary = serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
    // re-validate the centroid buffer
    Ok(Vocabulary::new(v.view, v.dim, v.centroids, v.seed)?)
}

pub fn encode(a: &EncodeArgs) -> CmdResult {
    let kernel = kernel_of(&a.kernel)?;
    let prep = prep_of(&a.image)?;
    let n_views = match a.views {
        Some(n) => n,
        None => count_views(&a.input)?,
    };
    let vocabs = (0..n_views).map(|m| read_vocab(&a.vocab, m)).collect::<Result<Vec<_>, _>>()?;
    let (mut entries, mut bytes, mut count) = (0usize, 0usize, 0usize);
    for (m, vocab) in vocabs.iter().enumerate() {
        let out_dir = view_dir(&a.out, m);
        create_dir(&out_dir)?;
        for (id, files) in list_raw_entities(&a.input, m)? {
            let grids = files
                .iter()
                .map(|f| Ok(quantize(&load_features(f, prep)?, vocab)?))
                .collect::<Result<Vec<_>, CliError>>()?;
            let map = encode_entity(&grids, &kernel)?.with_view(m as u32);
            let blob = encode_entity_bytes(&map);
            entries += map.nnz();
            bytes += blob.len();
            count += 1;
            write_file(&out_dir.join(format!("{id}.gmpe")), blob)?;
        }
    }
    write_file(&a.out.join(ENCODING_FILE), to_json(&kernel))?;
    let labels = a.input.join(LABELS_FILE);
    if labels.is_file() {
        write_labels(&a.out.join(LABELS_FILE), &read_labels(&labels)?)?;
    }
    println!(
        "encoded {count} entities over {n_views} views: mean {:.1} entries, {:.1} KB per entity",
        entries as f64 / count as f64,
        bytes as f64 / count as f64 / 1024.0
    );
    Ok(())
}

fn read_kernel(root: &Path, maps: &[AppearanceMap<f64>]) -> Result<KernelParams<f64>, CliError> {
    let p = root.join(ENCODING_FILE);
    if p.is_file() {
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        let k: KernelParams<f64> =
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        k.validate()?;
        return Ok(k);
    }
    let stride = maps.first().map_or(4, |m| m.stride());
    Ok(KernelParams {
        stride,
        ..KernelParams::default()
    })
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let mode: TrainMode = a.mode.parse()?;
    let cfg = TrainConfig {
        lambda1: a.lambda1,
        lambda2: a.lambda2,
        lambda3: a.lambda3,
        mode,
        max_outer: a.max_outer,
        outer_tol: a.outer_tol,
        n_samples: a.n_samples,
        pos_fraction: a.pos_fraction,
        seed: a.seed,
        rebalance: !a.no_rebalance,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let data = load_dataset(&a.data, a.views)?;
    if data.views.len() < 2 {
        return Err(CliError::usage("training needs at least two views"));
    }
    if data.views.iter().any(|v| v.maps.is_empty()) {
        return Err(CliError::usage("every view needs at least one entity"));
    }
    let kernel = read_kernel(&a.data, &data.views[0].maps)?;
    let identities: Vec<Vec<u64>> = data.views.iter().map(|v| v.identities.clone()).collect();
    let samples = sample_groups(&identities, cfg.n_samples, cfg.pos_fraction, cfg.seed)?;
    let mut set = TrainingSet::new(data.views.into_iter().map(|v| v.maps).collect(), samples, kernel)?;
    if let Some(dir) = &a.vocab {
        set.vocabs = (0..set.n_views()).map(|m| read_vocab(dir, m)).collect::<Result<_, _>>()?;
    }
    println!("training {:?} on {} tuples over {} views", mode, set.samples.len(), set.n_views());
    let run = train_model(&set, &cfg)?;
    let accuracy = training_accuracy(&run.model, &set)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let digest = save_model(&a.out, &run.model)?;
    let trace_path = a.out.with_extension("trace.csv");
    write_file(&trace_path, run.trace_csv())?;
    let objective = run.trace.last().map_or(f64::NAN, |t| t.objective);
    println!(
        "{} outer iterations{}, final objective {objective:.6e}, training accuracy {accuracy:.4}",
        run.outer_iterations,
        if run.converged { " (converged)" } else { "" }
    );
    println!("beta {:?}", run.model.coeffs.beta);
    println!("model {} sha256 {digest}", a.out.display());
    println!("trace {}", trace_path.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let reduce: ReduceChoice = a.reduce.parse()?;
    if a.trials == 0 {
        return Err(CliError::usage("--trials must be >= 1"));
    }
    let model = load_model::<f64>(&a.model)?;
    let data = load_dataset(&a.data, Some(model.n_views))?;
    let (pv, gv) = (a.probe_view, a.gallery_view);
    if pv >= model.n_views || gv >= model.n_views || pv == gv {
        return Err(CliError::usage(format!(
            "probe and gallery views must be distinct and below {}",
            model.n_views
        )));
    }
    if data.views[pv].maps.is_empty() || data.views[gv].maps.is_empty() {
        return Err(CliError::usage("probe or gallery set is empty"));
    }
    let gallery_ids: BTreeSet<u64> = data.views[gv].identities.iter().copied().collect();
    let shared: Vec<u64> = data.views[pv]
        .identities
        .iter()
        .copied()
        .filter(|i| gallery_ids.contains(i))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if let Some(g) = a.gallery_size {
        if g == 0 || g > shared.len() {
            return Err(CliError::usage(format!("--gallery-size must be in 1..={}", shared.len())));
        }
    }

    let mut reports = Vec::with_capacity(a.trials);
    for t in 0..a.trials {
        let seed = a.seed.wrapping_add(t as u64);
        let keep: Option<BTreeSet<u64>> = a.gallery_size.map(|g| {
            let mut ids = shared.clone();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            ids.into_iter().take(g).collect()
        });
        let mut split = EvalSplit {
            maps: Vec::new(),
            identities: Vec::new(),
        };
        for v in &data.views {
            let idx: Vec<usize> = (0..v.maps.len())
                .filter(|&e| keep.as_ref().is_none_or(|k| k.contains(&v.identities[e])))
                .collect();
            split.maps.push(idx.iter().map(|&e| &v.maps[e]).collect());
            split.identities.push(idx.iter().map(|&e| v.identities[e]).collect());
        }
        let cfg = EvalConfig {
            probe_view: pv,
            gallery_view: gv,
            reduce,
            threshold: a.threshold,
            seed,
        };
        reports.push(evaluate_protocol(&model, &split, &cfg)?);
    }
    let report = average_reports(&reports)?;
    write_report(&a.out, &report, a.trials)?;
    println!(
        "{} probes vs {} gallery entities, {} trial(s)",
        report.n_probe, report.n_gallery, a.trials
    );
    for m in &report.methods {
        println!(
            "{:>8}: rank-1 {:.4}  AUC {:.2}%  verification {:.4}",
            m.method,
            m.cmc.rates[0],
            100.0 * m.auc,
            m.verification
        );
    }
    println!("report written to {}", a.out.display());
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport, trials: usize) -> CmdResult {
    create_dir(dir)?;
    #[derive(Serialize)]
    struct Json<'a> {
        trials: usize,
        #[serde(flatten)]
        report: &'a EvalReport,
    }
    write_file(&dir.join("report.json"), to_json(&Json { trials, report }))?;
    write_file(&dir.join("cmc.csv"), cmc_csv(report))?;
    write_file(&dir.join("summary.csv"), summary_csv(report))?;
    write_file(&dir.join("cmc.svg"), cmc_svg(report))
}

fn write_split(root: &Path, data: &SynthData, kernel: &KernelParams<f64>, files: &mut Vec<PathBuf>) -> CmdResult {
    let mut labels = Vec::new();
    for (m, view) in data.views.iter().enumerate() {
        let dir = view_dir(root, m);
        create_dir(&dir)?;
        for (stack, &identity) in view.entities.iter().zip(&view.identities) {
            let id = format!("id{identity:06}");
            let map = encode_entity(stack, kernel)?.with_view(m as u32);
            let path = dir.join(format!("{id}.gmpe"));
            write_entity(&path, &map)?;
            files.push(path);
            labels.push(LabelRow {
                entity_id: id,
                view: m,
                identity,
            });
        }
    }
    let lp = root.join(LABELS_FILE);
    write_labels(&lp, &labels)?;
    let kp = root.join(ENCODING_FILE);
    write_file(&kp, to_json(kernel))?;
    files.extend([lp, kp]);
    Ok(())
}

pub fn synth(a: &SynthArgs) -> CmdResult {
    let spec = SynthSpec {
        n_views: a.views,
        n_identities: a.identities + a.test_identities,
        images_per_entity: a.images_per_entity,
        grid: (a.width, a.height),
        n_parts: a.parts,
        k_words: a.k,
        word_noise: a.noise,
        jitter: a.jitter,
        seed: a.seed,
    };
    let kernel = kernel_of(&a.kernel)?;
    if a.identities < 2 {
        return Err(CliError::usage("--identities must be >= 2"));
    }
    let data = generate(&spec)?;
    let mut files = Vec::new();
    write_split(&a.out.join("train"), &data.subset(0..a.identities), &kernel, &mut files)?;
    if a.test_identities > 0 {
        write_split(
            &a.out.join("test"),
            &data.subset(a.identities..spec.n_identities),
            &kernel,
            &mut files,
        )?;
    }

    #[derive(Serialize)]
    struct Manifest<'a> {
        spec: &'a SynthSpec,
        kernel: &'a KernelParams<f64>,
        train_identities: usize,
        test_identities: usize,
        files: std::collections::BTreeMap<String, String>,
    }
    let manifest = to_json(&Manifest {
        spec: &spec,
        kernel: &kernel,
        train_identities: a.identities,
        test_identities: a.test_identities,
        files: digest_tree(&a.out, &files)?,
    });
    write_file(&a.out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} entities over {} views to {}",
        files.len() - if a.test_identities > 0 { 4 } else { 2 },
        a.views,
        a.out.display()
    );
    println!("manifest sha256 {}", sha256_hex(manifest.as_bytes()));
    Ok(())
}
