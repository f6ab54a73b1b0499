use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gmp::encoding::{read_entity, AppearanceMap};
use gmp::eval::{cmc, reduce_tensor, score_tensor, Reduction};
use gmp::imaging::{write_feature_field, FeatureField};
use gmp::model::load_model;
use gmp::scoring::BilinearModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn gmp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmp")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gmp(args);
    assert!(
        out.status.success(),
        "gmp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    gmp(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "synth",
        "--identities",
        "12",
        "--test-identities",
        "12",
        "--width",
        "24",
        "--height",
        "16",
        "--parts",
        "12",
        "--k",
        "16",
        "--sigma",
        "2",
        "--alpha",
        "4",
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", s(data), "--n-samples", "400", "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args)
}

fn last_objective(trace: &Path) -> f64 {
    let text = std::fs::read_to_string(trace).unwrap();
    text.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn synth_is_deterministic_and_lays_out_views() {
    let t = TempDir::new().unwrap();
    let a = synth(&t.path().join("a"), &["--seed", "4"]);
    let b = synth(&t.path().join("b"), &["--seed", "4"]);
    let digest = |o: &str| o.lines().find(|l| l.starts_with("manifest sha256")).unwrap().to_string();
    assert_eq!(digest(&a), digest(&b));
    let c = synth(&t.path().join("c"), &["--seed", "5"]);
    assert_ne!(digest(&a), digest(&c));

    synth(&t.path().join("four"), &["--views", "4"]);
    for m in 0..4 {
        assert!(t.path().join(format!("four/train/view_{m}")).is_dir());
        assert!(t.path().join(format!("four/test/view_{m}")).is_dir());
    }
    assert!(!t.path().join("four/train/view_4").exists());
    let labels = std::fs::read_to_string(t.path().join("four/train/labels.csv")).unwrap();
    assert!(labels.starts_with("entity_id,view,identity\n"));
    assert_eq!(labels.lines().count(), 1 + 4 * 12);
}

#[test]
fn synth_rejects_invalid_spec() {
    let t = TempDir::new().unwrap();
    let out = t.path().join("x");
    assert_eq!(code(&["synth", "--noise", "1.5", "--out", s(&out)]), 2);
    assert_eq!(code(&["synth", "--jitter", "20", "--out", s(&out)]), 2);
    assert_eq!(code(&["synth", "--no-such-flag"]), 2);
}

#[test]
fn noiseless_pipeline_ranks_perfectly() {
    let t = TempDir::new().unwrap();
    let ds = t.path().join("ds");
    synth(&ds, &["--noise", "0", "--jitter", "0", "--seed", "2"]);
    let model = t.path().join("m.gmpm");
    train(&ds.join("train"), &model, &[]);
    let rep = t.path().join("rep");
    ok(&["eval", "--model", s(&model), "--data", s(&ds.join("test")), "--out", s(&rep)]);
    let r = report(&rep);
    let rank1 = r["methods"][0]["cmc"]["rates"][0].as_f64().unwrap();
    assert!(rank1 >= 0.99, "rank-1 {rank1}");
    for f in ["cmc.csv", "cmc.svg", "summary.csv", "report.json"] {
        assert!(rep.join(f).is_file(), "{f}");
    }
    assert!(std::fs::read_to_string(rep.join("cmc.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn two_view_modes_agree_and_training_is_reproducible() {
    let t = TempDir::new().unwrap();
    let ds = t.path().join("ds");
    synth(&ds, &["--seed", "3"]);
    let data = ds.join("train");
    let multi = t.path().join("multi.gmpm");
    let double = t.path().join("double.gmpm");
    let again = t.path().join("again.gmpm");
    train(&data, &multi, &["--mode", "multi-view", "--seed", "9"]);
    train(&data, &double, &["--mode", "double-view", "--seed", "9"]);
    train(&data, &again, &["--mode", "multi-view", "--seed", "9"]);
    let (a, b) = (
        last_objective(&t.path().join("multi.trace.csv")),
        last_objective(&t.path().join("double.trace.csv")),
    );
    assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    assert_eq!(std::fs::read(&multi).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(code(&["train", "--data", s(&data), "--mode", "triple", "--out", s(&multi)]), 2);
    assert_eq!(
        code(&["train", "--data", s(&t.path().join("missing")), "--out", s(&multi)]),
        2
    );
}

#[test]
fn direct_two_view_mode_trains() {
    let t = TempDir::new().unwrap();
    let ds = t.path().join("ds");
    synth(&ds, &["--noise", "0", "--jitter", "0"]);
    let model = t.path().join("d.gmpm");
    let out = train(&ds.join("train"), &model, &["--mode", "direct-two-view"]);
    assert!(out.contains("DirectTwoView"));
    let m: BilinearModel<f64> = load_model(&model).unwrap();
    assert_eq!(m.coeffs.beta, vec![1.0]);
}

#[test]
fn three_view_reductions_match_direct_computation() {
    let t = TempDir::new().unwrap();
    let ds = t.path().join("ds");
    synth(&ds, &["--views", "3", "--seed", "6"]);
    let model_path = t.path().join("m.gmpm");
    train(&ds.join("train"), &model_path, &[]);
    let test = ds.join("test");
    let model: BilinearModel<f64> = load_model(&model_path).unwrap();
    // test identities are numbered after the training ones
    let views: Vec<Vec<AppearanceMap<f64>>> = (0..3)
        .map(|m| {
            (12..24)
                .map(|i| read_entity(&test.join(format!("view_{m}/id{i:06}.gmpe"))).unwrap())
                .collect()
        })
        .collect();
    let cands: Vec<Vec<&AppearanceMap<f64>>> = views.iter().map(|v| v.iter().collect()).collect();
    let tensor = score_tensor(&model, &cands).unwrap();
    let truth: Vec<usize> = (0..12).collect();
    for (op, name) in [(Reduction::Sum, "sum"), (Reduction::Max, "max")] {
        let rep = t.path().join(name);
        ok(&["eval", "--model", s(&model_path), "--data", s(&test), "--reduce", name, "--out", s(&rep)]);
        let r = report(&rep);
        let methods: Vec<String> = r["methods"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| m["method"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(methods, vec![name.to_string(), "sum".into(), "max".into()]);
        // probe view 1 on rows, gallery view 0 on columns
        let want = cmc(&reduce_tensor(&tensor, (1, 0), op).unwrap(), &truth).unwrap();
        let got: Vec<f64> = r["methods"][0]["cmc"]["rates"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(got, want.rates, "{name}");
    }
}

#[test]
fn eval_reports_are_reproducible_and_validated() {
    let t = TempDir::new().unwrap();
    let ds = t.path().join("ds");
    synth(&ds, &["--seed", "8"]);
    let model = t.path().join("m.gmpm");
    train(&ds.join("train"), &model, &[]);
    let test = ds.join("test");
    let (r1, r2) = (t.path().join("r1"), t.path().join("r2"));
    ok(&["eval", "--model", s(&model), "--data", s(&test), "--out", s(&r1)]);
    ok(&["eval", "--model", s(&model), "--data", s(&test), "--out", s(&r2)]);
    assert_eq!(
        std::fs::read(r1.join("report.json")).unwrap(),
        std::fs::read(r2.join("report.json")).unwrap()
    );

    let r3 = t.path().join("r3");
    let args = ["eval", "--model", s(&model), "--data", s(&test), "--trials", "3", "--gallery-size", "6"];
    ok(&[&args[..], &["--out", s(&r3)]].concat());
    let r = report(&r3);
    assert_eq!(r["trials"], 3);
    assert_eq!(r["n_gallery"], 6);

    assert_eq!(code(&["eval", "--model", s(&model), "--data", s(&test), "--reduce", "mean", "--out", s(&r3)]), 2);
    assert_eq!(code(&["eval", "--model", s(&model), "--data", s(&test), "--probe-view", "0", "--out", s(&r3)]), 2);

    // labels listing only the gallery view leave no probes
    let empty = t.path().join("empty");
    std::fs::create_dir_all(empty.join("view_0")).unwrap();
    std::fs::copy(test.join("view_0/id000012.gmpe"), empty.join("view_0/id000012.gmpe")).unwrap();
    std::fs::write(empty.join("labels.csv"), "entity_id,view,identity\nid000012,0,12\n").unwrap();
    assert_eq!(code(&["eval", "--model", s(&model), "--data", s(&empty), "--out", s(&r3)]), 2);

    let mut corrupt = std::fs::read(&model).unwrap();
    let n = corrupt.len();
    corrupt[n - 1] ^= 0xff;
    let bad = t.path().join("bad.gmpm");
    std::fs::write(&bad, corrupt).unwrap();
    assert_eq!(code(&["eval", "--model", s(&bad), "--data", s(&test), "--out", s(&r3)]), 3);
}

// Piecewise-constant 12-d features: `regions` blocks of random colour.
fn blocky_field(rng: &mut ChaCha8Rng, w: usize, h: usize, block: usize, dim: usize) -> FeatureField {
    let bw = w.div_ceil(block);
    let colours: Vec<Vec<f32>> = (0..bw * h.div_ceil(block))
        .map(|_| (0..dim).map(|_| rng.gen()).collect())
        .collect();
    let mut v = Vec::with_capacity(w * h * dim);
    for y in 0..h {
        for x in 0..w {
            v.extend_from_slice(&colours[(y / block) * bw + x / block]);
        }
    }
    FeatureField::new(w, h, dim, v).unwrap()
}

fn feature_input(root: &Path, views: usize, entities: usize, size: (usize, usize), block: usize) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in 0..views {
        let dir = root.join(format!("view_{m}"));
        std::fs::create_dir_all(&dir).unwrap();
        for e in 0..entities {
            let f = blocky_field(&mut rng, size.0, size.1, block, 12);
            write_feature_field(&dir.join(format!("p{e:03}.gmpf")), &f).unwrap();
        }
    }
    root.to_path_buf()
}

#[test]
fn build_vocab_contract() {
    let t = TempDir::new().unwrap();
    let input = feature_input(&t.path().join("in"), 2, 4, (40, 30), 2);
    let (v1, v2) = (t.path().join("v1"), t.path().join("v2"));
    let args = |out: &Path| -> Vec<String> {
        ["build-vocab", "--input", s(&input), "--k", "300", "--samples", "3000", "--seed", "5", "--out", s(out)]
            .iter()
            .map(|x| x.to_string())
            .collect()
    };
    let a1 = args(&v1);
    ok(&a1.iter().map(String::as_str).collect::<Vec<_>>());
    let a2 = args(&v2);
    ok(&a2.iter().map(String::as_str).collect::<Vec<_>>());
    for m in 0..2 {
        let name = format!("vocab_view_{m}.json");
        let bytes = std::fs::read(v1.join(&name)).unwrap();
        assert_eq!(bytes, std::fs::read(v2.join(&name)).unwrap());
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["k"], 300);
        assert_eq!(v["view"], m);
        let csv = std::fs::read_to_string(v1.join(format!("vocab_view_{m}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 300);
    }

    // 4 fields of 40x30 with 2x2 blocks: at most 4 * 300 distinct vectors
    let too_many = ["build-vocab", "--input", s(&input), "--k", "5000", "--samples", "3000", "--out", s(&v1)];
    assert_eq!(code(&too_many), 2);

    let empty = t.path().join("empty");
    std::fs::create_dir_all(empty.join("view_0")).unwrap();
    assert_eq!(code(&["build-vocab", "--input", s(&empty), "--k", "3", "--out", s(&v1)]), 2);
    assert_eq!(code(&["build-vocab", "--input", s(&t.path().join("nothing")), "--out", s(&v1)]), 2);

    let mixed = t.path().join("mixed");
    std::fs::create_dir_all(mixed.join("view_0")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    write_feature_field(&mixed.join("view_0/a.gmpf"), &blocky_field(&mut rng, 8, 8, 1, 12)).unwrap();
    write_feature_field(&mixed.join("view_0/b.gmpf"), &blocky_field(&mut rng, 8, 8, 1, 6)).unwrap();
    assert_eq!(code(&["build-vocab", "--input", s(&mixed), "--k", "3", "--out", s(&v1)]), 3);

    std::fs::write(mixed.join("view_0/b.gmpf"), b"GMPF garbage").unwrap();
    assert_eq!(code(&["build-vocab", "--input", s(&mixed), "--k", "3", "--out", s(&v1)]), 3);
}

#[test]
fn encode_contract() {
    let t = TempDir::new().unwrap();
    let input = feature_input(&t.path().join("in"), 2, 3, (20, 16), 3);
    let vocab = t.path().join("vocab");
    ok(&["build-vocab", "--input", s(&input), "--k", "20", "--samples", "2000", "--out", s(&vocab)]);

    let (e1, e2) = (t.path().join("e1"), t.path().join("e2"));
    let out = ok(&["encode", "--input", s(&input), "--vocab", s(&vocab), "--out", s(&e1)]);
    assert!(out.contains("mean"), "{out}");
    ok(&["encode", "--input", s(&input), "--vocab", s(&vocab), "--out", s(&e2)]);
    for m in 0..2 {
        for e in 0..3 {
            let rel = format!("view_{m}/p{e:03}.gmpe");
            assert_eq!(std::fs::read(e1.join(&rel)).unwrap(), std::fs::read(e2.join(&rel)).unwrap());
        }
    }

    let sharp = t.path().join("sharp");
    ok(&["encode", "--input", s(&input), "--vocab", s(&vocab), "--alpha", "0", "--stride", "3", "--out", s(&sharp)]);
    let map: AppearanceMap<f64> = read_entity(&sharp.join("view_0/p000.gmpe")).unwrap();
    assert_eq!(map.nnz(), map.locations());
    assert!(map.triplets().iter().all(|&(_, _, v)| v == 1.0));

    let no_vocab = t.path().join("nv");
    std::fs::create_dir_all(&no_vocab).unwrap();
    assert_eq!(code(&["encode", "--input", s(&input), "--vocab", s(&no_vocab), "--out", s(&e1)]), 2);
    assert_eq!(code(&["encode", "--input", s(&input), "--vocab", s(&vocab), "--sigma", "0", "--out", s(&e1)]), 2);
}

#[test]
fn encode_full_size_entity_stays_small() {
    let t = TempDir::new().unwrap();
    // 2x2 patches on a 48x128 image leave a 47x127 field
    let input = feature_input(&t.path().join("in"), 1, 2, (47, 127), 6);
    let vocab = t.path().join("vocab");
    ok(&["build-vocab", "--input", s(&input), "--k", "300", "--samples", "6000", "--out", s(&vocab)]);
    let enc = t.path().join("enc");
    ok(&["encode", "--input", s(&input), "--vocab", s(&vocab), "--stride", "4", "--out", s(&enc)]);
    for e in 0..2 {
        let size = std::fs::metadata(enc.join(format!("view_0/p{e:03}.gmpe"))).unwrap().len();
        assert!(size <= 300 * 1024, "{size} bytes");
    }
}

#[test]
fn encode_reads_images() {
    let t = TempDir::new().unwrap();
    let input = t.path().join("img");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for m in 0..2 {
        let dir = input.join(format!("view_{m}/person"));
        std::fs::create_dir_all(&dir).unwrap();
        for n in 0..2 {
            let img = image::RgbImage::from_fn(12, 20, |x, y| {
                let base = if (x / 4 + y / 5) % 2 == 0 { 40 } else { 200 };
                image::Rgb([base, rng.gen_range(0..255), (x * 20) as u8])
            });
            img.save(dir.join(format!("{n}.png"))).unwrap();
        }
    }
    let vocab = t.path().join("vocab");
    let common = ["--width", "12", "--height", "20"];
    ok(&[&["build-vocab", "--input", s(&input), "--k", "8", "--samples", "500", "--out", s(&vocab)][..], &common].concat());
    let enc = t.path().join("enc");
    ok(&[&["encode", "--input", s(&input), "--vocab", s(&vocab), "--stride", "2", "--out", s(&enc)][..], &common].concat());
    let map: AppearanceMap<f64> = read_entity(&enc.join("view_1/person.gmpe")).unwrap();
    assert_eq!(map.view(), 1);
    assert_eq!(map.k(), 8);
    assert_eq!(map.grid(), (11, 19));

    std::fs::write(input.join("view_0/person/broken.png"), b"not a png").unwrap();
    assert_eq!(code(&[&["encode", "--input", s(&input), "--vocab", s(&vocab), "--out", s(&enc)][..], &common].concat()), 3);
}
