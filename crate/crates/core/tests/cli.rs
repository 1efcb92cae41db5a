use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use albuseg::cli::{run_args, RunManifest, MANIFEST_FILE};
use albuseg::network::{build_network, Mode, NetworkConfig};
use albuseg::nifti::{read_labels, read_volume, write_volume};
use albuseg::synth::{brain_mask, phantom, read_scan, PhantomSpec};
use albuseg::tensor::Tensor;
use albuseg::volume::{crop, nonzero_bounding_box, MultiModalScan, NormRegion, Volume3D};
use albuseg::weights::{read_weights, write_weights, WeightStore};
use albuseg::Error;

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn run(args: &[&str]) -> albuseg::Result<RunManifest> {
    run_args(args)
}

fn synth(dir: &Path, cases: &str) -> PathBuf {
    let out = dir.join("data");
    run(&["synth", "--cases", cases, "--dims", "32,64,64", "--seed", "7", "--out", &s(&out)]).unwrap();
    out
}

fn pretrain(dir: &Path) -> PathBuf {
    let out = dir.join("pre");
    run(&["pretrain", "--config", "tiny", "--steps", "6", "--batch-size", "4", "--count", "32", "--out", &s(&out)])
        .unwrap();
    out.join("encoder")
}

const TRAIN_FLAGS: [&str; 10] =
    ["--config", "tiny", "--epochs", "2", "--batches-per-epoch", "2", "--batch-size", "2", "--patch", "8,32,32"];

fn bin() -> Process {
    Process::new(env!("CARGO_BIN_EXE_albuseg"))
}

#[test]
fn synth_is_deterministic_and_rejects_zero_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(tmp.path(), "3");
    let dirs: Vec<_> = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).collect();
    assert_eq!(dirs.len(), 3);
    let b = tmp.path().join("again");
    let m = run(&["synth", "--cases", "3", "--dims", "32,64,64", "--seed", "7", "--out", &s(&b)]).unwrap();
    let first: RunManifest = serde_json::from_str(&fs::read_to_string(a.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(first.outputs, m.outputs);
    assert_eq!(m.seed, Some(7));
    assert_eq!(m.config["dims"], serde_json::json!([32, 64, 64]));

    let err = run(&["synth", "--cases", "0", "--out", &s(&tmp.path().join("none"))]).unwrap_err();
    assert_eq!(err.class(), "config");
}

#[test]
fn binary_reports_error_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["synth", "--cases", "0", "--out"]).arg(tmp.path().join("x")).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error[config]: "), "{stderr}");

    let out = bin().args(["train", "--data", "d", "--out", "o"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[usage]: "));

    let out = bin()
        .env("ALBUSEG_THREADS", "zero")
        .args(["synth", "--cases", "1", "--out"])
        .arg(tmp.path().join("y"))
        .output()
        .unwrap();
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[config]: "));

    let out = bin()
        .env("ALBUSEG_THREADS", "1")
        .args(["synth", "--cases", "1", "--dims", "32,32,32", "--out"])
        .arg(tmp.path().join("z"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("z").join(MANIFEST_FILE).is_file());
}

#[test]
fn preprocess_lists_missing_modalities() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "1");
    let case = data.join("case_000");
    fs::remove_file(case.join("flair.nii")).unwrap();
    let err = run(&["preprocess", "--case", &s(&case), "--out", &s(&tmp.path().join("pp"))]).unwrap_err();
    assert!(matches!(err, Error::MissingInput(_)));
    assert!(err.to_string().contains("flair") && !err.to_string().contains("t2"), "{err}");

    fs::remove_file(case.join("t2.nii")).unwrap();
    let err = run(&["preprocess", "--case", &s(&case), "--out", &s(&tmp.path().join("pp"))]).unwrap_err();
    assert!(err.to_string().contains("flair, t2"), "{err}");
}

/// Patient directory whose three modalities are the same volume.
fn self_case(dir: &Path, spacing: [f64; 3]) -> (PathBuf, Volume3D) {
    let spec = PhantomSpec { spacing, ..PhantomSpec::new([32, 64, 64], 1, 4) };
    let case = phantom(&spec, 0).unwrap();
    let pdir = dir.join("self");
    fs::create_dir_all(&pdir).unwrap();
    let v = case.scan.channel(1).clone();
    for m in ["flair", "t1c", "t2"] {
        write_volume(&v, pdir.join(format!("{m}.nii"))).unwrap();
    }
    write_volume(&brain_mask(&case), pdir.join("mask.nii")).unwrap();
    albuseg::nifti::write_labels(&case.seg, pdir.join("seg.nii")).unwrap();
    (pdir, v)
}

#[test]
fn self_registration_returns_normalized_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (pdir, v) = self_case(tmp.path(), [1.0; 3]);
    let out = tmp.path().join("pp");
    run(&["preprocess", "--case", &s(&pdir), "--out", &s(&out)]).unwrap();
    let got = read_scan(out.join("self")).unwrap();
    let input = MultiModalScan::new(v.clone(), v.clone(), v, "self").unwrap();
    let bbox = nonzero_bounding_box(&input).unwrap();
    let (want, _) = crop(&input.normalized(NormRegion::Nonzero).unwrap(), None, &bbox).unwrap();
    for c in 0..3 {
        assert_eq!(got.channel(c), want.channel(c));
    }
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("self/preprocess.json")).unwrap()).unwrap();
    for r in record["registrations"].as_array().unwrap() {
        assert_eq!(r[1]["transform"]["translation"], serde_json::json!([0.0, 0.0, 0.0]));
        assert_eq!(r[1]["transform"]["angles"], serde_json::json!([0.0, 0.0, 0.0]));
    }
    assert_eq!(read_labels(out.join("self/seg.nii")).unwrap().dims(), got.dims());
}

#[test]
fn anisotropic_input_is_resampled_to_1mm() {
    let tmp = tempfile::tempdir().unwrap();
    let (pdir, v) = self_case(tmp.path(), [2.0, 1.0, 1.0]);
    let out = tmp.path().join("pp");
    run(&["preprocess", "--case", &s(&pdir), "--no-register", "--out", &s(&out)]).unwrap();
    let got = read_volume(out.join("self/t1c.nii")).unwrap();
    assert_eq!(got.spacing(), [1.0; 3]);
    let scan = MultiModalScan::new(v.clone(), v.clone(), v, "self").unwrap();
    let [(z0, z1), _, _] = nonzero_bounding_box(&scan).unwrap().0;
    assert_eq!(got.dims()[0], 2 * (z1 - z0));
}

#[test]
fn pretrain_is_deterministic_loadable_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let base = pretrain(tmp.path());
    let again = tmp.path().join("pre2");
    run(&["pretrain", "--config", "tiny", "--steps", "6", "--batch-size", "4", "--count", "32", "--out", &s(&again)])
        .unwrap();
    for ext in ["encoder.manifest", "encoder.blob", "pretrain_log.tsv"] {
        assert_eq!(fs::read(tmp.path().join("pre").join(ext)).unwrap(), fs::read(again.join(ext)).unwrap());
    }
    let store = read_weights(&base).unwrap();
    let (_, mut params) = build_network::<f32>(NetworkConfig::tiny(), 0).unwrap();
    params.load_pretrained(&store, true).unwrap();

    let err = run(&["pretrain", "--config", "tiny", "--steps", "1", "--out", &s(&again)]).unwrap_err();
    assert_eq!(err.class(), "config");
    run(&["pretrain", "--config", "tiny", "--steps", "1", "--batch-size", "4", "--count", "8", "--force", "--out", &s(&again)])
        .unwrap();
}

#[test]
fn pretraining_loss_decreases() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("pre");
    run(&["pretrain", "--config", "tiny", "--steps", "60", "--count", "128", "--seed", "2", "--out", &s(&out)]).unwrap();
    let log = fs::read_to_string(out.join("pretrain_log.tsv")).unwrap();
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "loss {head} -> {tail}");
}

#[test]
fn train_writes_logs_and_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "3");
    let enc = pretrain(tmp.path());
    let train = |out: &str, seed: &str| {
        let out = tmp.path().join(out);
        let a0 = s(&data);
        let a1 = s(&enc);
        let mut args = vec!["train", "--data", &a0, "--val", "1", "--pretrained", &a1, "--seed", seed];
        let o = s(&out);
        args.extend(TRAIN_FLAGS);
        args.extend(["--out", &o]);
        run(&args).unwrap();
        out
    };
    let a = train("a", "3");
    let log = albuseg::training::TrainRun::parse_log(&fs::read_to_string(a.join("train_log.tsv")).unwrap()).unwrap();
    assert_eq!(log.len(), 2);
    let b = train("b", "3");
    let c = train("c", "4");
    assert_eq!(fs::read(a.join("model.blob")).unwrap(), fs::read(b.join("model.blob")).unwrap());
    assert_ne!(fs::read(a.join("model.blob")).unwrap(), fs::read(c.join("model.blob")).unwrap());

    let mut bad = WeightStore::new();
    bad.insert("enc.stage0.block0.conv1.weight", &[8, 3, 7, 7], vec![0.0; 8 * 3 * 49]).unwrap();
    write_weights(&bad, tmp.path().join("bad")).unwrap();
    let a0 = s(&data);
    let mut args = vec!["train", "--data", &a0, "--pretrained"];
    let badp = s(&tmp.path().join("bad"));
    let o = s(&tmp.path().join("d"));
    args.push(&badp);
    args.extend(TRAIN_FLAGS);
    args.extend(["--out", &o]);
    assert!(matches!(run(&args).unwrap_err(), Error::MissingTensor(_)));
}

#[test]
fn single_window_prediction_equals_direct_forward() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "2");
    let a0 = s(&data);
    let mut args = vec!["train", "--data", &a0, "--random-init"];
    let o = s(&tmp.path().join("t"));
    args.extend(TRAIN_FLAGS);
    args.extend(["--out", &o]);
    run(&args).unwrap();

    // strictly positive channels, so the crop is the whole grid
    let dims = [8, 32, 32];
    let pdir = tmp.path().join("small/p0");
    fs::create_dir_all(&pdir).unwrap();
    let vols: Vec<Volume3D> = (0..3)
        .map(|c| {
            Volume3D::from_fn(dims, [1.0; 3], |z, y, x| 1.0 + ((z * 7 + y * 3 + x * (c + 1)) % 11) as f32).unwrap()
        })
        .collect();
    for (m, v) in ["flair", "t1c", "t2"].iter().zip(&vols) {
        write_volume(v, pdir.join(format!("{m}.nii"))).unwrap();
    }
    let pred = tmp.path().join("pred");
    let weights = tmp.path().join("t/model");
    run(&["predict", "--weights", &s(&weights), "--data", &s(&tmp.path().join("small")), "--probs", "--out", &s(&pred)])
        .unwrap();

    let card: albuseg::cli::ModelCard =
        serde_json::from_str(&fs::read_to_string(albuseg::cli::card_path(&weights)).unwrap()).unwrap();
    let (net, mut params) = build_network::<f32>(card.network, 0).unwrap();
    params.load_store(&read_weights(&weights).unwrap()).unwrap();
    let scan = MultiModalScan::new(vols[0].clone(), vols[1].clone(), vols[2].clone(), "p0").unwrap();
    let norm = scan.normalized(NormRegion::Nonzero).unwrap();
    let x: Vec<f32> = norm.channels().iter().flat_map(|c| c.data().to_vec()).collect();
    let (probs, _) = net.forward(&params, &Tensor::from_vec(&[1, 3, 8, 32, 32], x).unwrap(), Mode::Eval).unwrap();
    let n = 8 * 32 * 32;
    for (c, code) in [0, 1, 2, 4].iter().enumerate() {
        let got = read_volume(pred.join(format!("p0/prob_{code}.nii"))).unwrap();
        assert_eq!(got.data(), &probs.data()[c * n..(c + 1) * n]);
    }

    let again = tmp.path().join("pred2");
    run(&["predict", "--weights", &s(&weights), "--case", &s(&pdir), "--probs", "--out", &s(&again)]).unwrap();
    assert_eq!(fs::read(pred.join("p0/seg.nii")).unwrap(), fs::read(again.join("p0/seg.nii")).unwrap());
}

#[test]
fn evaluate_reports_and_rejects_empty_input() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "2");
    let out = tmp.path().join("ev");
    run(&["evaluate", "--ref", &s(&data), "--runs", &s(&data), "--runs", &s(&data), "--out", &s(&out)]).unwrap();
    let report = fs::read_to_string(out.join("report.tsv")).unwrap();
    let dice = report.lines().find(|l| l.starts_with("dice")).unwrap();
    assert_eq!(dice.split('\t').take(4).collect::<Vec<_>>(), ["dice", "1.0000 (1.0000)", "1.0000 (1.0000)", "1.0000 (1.0000)"]);
    assert_eq!(fs::read_to_string(out.join("cases.tsv")).unwrap().lines().count(), 1 + 4);

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let err = run(&["evaluate", "--ref", &s(&empty), "--runs", &s(&data), "--out", &s(&out)]).unwrap_err();
    assert_eq!(err.class(), "input");
    let err = run(&["evaluate", "--ref", &s(&data), "--runs", &s(&empty), "--out", &s(&out)]).unwrap_err();
    assert_eq!(err.class(), "input");
}

#[test]
fn compare_emits_per_epoch_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "3");
    let enc = pretrain(tmp.path());
    let out = tmp.path().join("cmp");
    let a0 = s(&data);
    let a1 = s(&enc);
    let mut args = vec!["compare", "--data", &a0, "--val", "1", "--pretrained", &a1, "--seeds", "2"];
    let o = s(&out);
    args.extend(TRAIN_FLAGS);
    args.extend(["--out", &o]);
    run(&args).unwrap();
    assert_eq!(fs::read_to_string(out.join("compare.tsv")).unwrap().lines().count(), 1 + 2 * 2 * 3);
    assert_eq!(fs::read_to_string(out.join("final.tsv")).unwrap().lines().count(), 1 + 3);
    assert_eq!(fs::read_dir(out.join("runs")).unwrap().count(), 4);
}

#[test]
fn rerun_detects_changed_inputs_and_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "2");
    let ev = tmp.path().join("ev");
    run(&["evaluate", "--ref", &s(&data), "--runs", &s(&data), "--out", &s(&ev)]).unwrap();
    let manifest = ev.join(MANIFEST_FILE);
    run(&["rerun", "--manifest", &s(&manifest), "--out", &s(&tmp.path().join("ev2"))]).unwrap();

    let mut m: RunManifest = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    m.outputs[0].sha256 = "00".repeat(32);
    let forged = tmp.path().join("forged.json");
    fs::write(&forged, serde_json::to_string(&m).unwrap()).unwrap();
    let err = run(&["rerun", "--manifest", &s(&forged), "--out", &s(&tmp.path().join("ev3"))]).unwrap_err();
    assert!(matches!(err, Error::Manifest(_)), "{err}");

    fs::write(data.join("case_000/seg.nii"), b"changed").unwrap();
    let err = run(&["rerun", "--manifest", &s(&manifest), "--out", &s(&tmp.path().join("ev4"))]).unwrap_err();
    assert!(err.to_string().contains("changed"), "{err}");
}

#[test]
fn commands_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "2");
    let enc = pretrain(tmp.path());
    let a0 = s(&data);
    let a1 = s(&enc);
    let mut args = vec!["train", "--data", &a0, "--pretrained", &a1];
    let o = s(&tmp.path().join("t"));
    args.extend(TRAIN_FLAGS);
    args.extend(["--out", &o]);
    run(&args).unwrap();
    let pred = tmp.path().join("pred");
    run(&["predict", "--weights", &s(&tmp.path().join("t/model")), "--data", &s(&data), "--out", &s(&pred)]).unwrap();
    assert_eq!(read_labels(pred.join("case_001/seg.nii")).unwrap().dims(), [32, 64, 64]);
    run(&["evaluate", "--ref", &s(&data), "--runs", &s(&pred), "--out", &s(&tmp.path().join("ev"))]).unwrap();
    assert!(tmp.path().join("ev/boxplot.tsv").is_file());
}
