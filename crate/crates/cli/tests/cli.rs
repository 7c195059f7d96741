use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tinysed::cost::{CostReport, Verdict};
use tinysed::qexec::CompareReport;
use tinysed::quant::QuantPlan;
use tinysed::tensorfile::{load_tensors, save_tensors, NamedTensor};
use tinysed::Tensor;

fn tinysed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinysed")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tinysed(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    tinysed(args).status.code().unwrap()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

#[test]
fn estimate_prints_conv1_row() {
    let out = ok(&["estimate", "--preset", "M20k_int8"]);
    let conv1 = out.lines().find(|l| l.starts_with("conv1")).unwrap();
    assert!(conv1.contains("419.61"), "{conv1}");
    assert!(out.contains("34328"));
}

#[test]
fn estimate_json_round_trips() {
    let out = ok(&["--json", "estimate", "--arch", "M20k"]);
    let r: CostReport = serde_json::from_str(&out).unwrap();
    assert_eq!(r.total_params, 30_606);
    assert_eq!(serde_json::from_str::<CostReport>(&serde_json::to_string(&r).unwrap()).unwrap(), r);
}

#[test]
fn feasibility_mcu_hosts() {
    let out = ok(&["--json", "feasibility", "--preset", "M20k_int8", "--platform", "all"]);
    let verdicts: Vec<Verdict> = serde_json::from_str(&out).unwrap();
    let pass: Vec<&str> = verdicts.iter().filter(|v| v.passes).map(|v| v.platform.as_str()).collect();
    assert_eq!(pass, ["STM32L476RG", "TI MSP432P4111", "BeagleBone Black", "Raspberry Pi 3 B+"]);
    let text = ok(&["feasibility", "--preset", "M20k_int8", "--platform", "uc32"]);
    assert!(text.contains("FAIL") && text.contains("short 1560 B"), "{text}");
}

#[test]
fn power_budget_filters_boards() {
    let out = ok(&["--json", "feasibility", "--preset", "M20k_int8", "--power-budget", "100"]);
    let verdicts: Vec<Verdict> = serde_json::from_str(&out).unwrap();
    let pass: Vec<&str> = verdicts.iter().filter(|v| v.passes).map(|v| v.platform.as_str()).collect();
    assert_eq!(pass, ["STM32L476RG", "TI MSP432P4111"]);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&["estimate", "--preset", "M20k", "--bogus"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["estimate"]), 2);
    assert_eq!(code(&["estimate", "--preset", "NoSuchModel"]), 2);
    assert_eq!(code(&["feasibility", "--preset", "M20k", "--platform", "Commodore"]), 2);
    assert_eq!(code(&["feasibility", "--preset", "M20k", "--power-budget", "-3"]), 2);
    assert_eq!(code(&["infer", "clip.wav"]), 2);
    let err = String::from_utf8(tinysed(&["estimate", "--preset", "NoSuchModel"]).stderr).unwrap();
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn domain_errors_exit_1() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&["export", "--qmodel", &p(&dir, "missing.tsed"), "-o", &p(&dir, "x.h")]), 1);
    fs::write(dir.path().join("junk.tsed"), b"not a tensor file").unwrap();
    assert_eq!(
        code(&[
            "compare",
            "--model",
            &p(&dir, "junk.tsed"),
            "--qmodel",
            &p(&dir, "junk.tsed"),
            "--data",
            &p(&dir, "junk.tsed")
        ]),
        1
    );
}

fn write_tone(path: &Path, seconds: f64) {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for n in 0..(seconds * 16_000.0) as usize {
        let v = (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16_000.0).sin() * 0.3;
        w.write_sample((v * 32767.0) as i16).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn featurize_wav() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("tone.wav");
    write_tone(&wav, 2.0);
    let out = p(&dir, "tone.tsed");
    ok(&["featurize", wav.to_str().unwrap(), "-o", &out]);
    let t = load_tensors(&out).unwrap();
    let patches = tinysed::tensorfile::find_f32(&t, "patches").unwrap();
    assert_eq!(patches.shape(), [4, 96, 64, 1]);
    assert!(patches.data().iter().all(|v| v.is_finite()));
}

fn digest(paths: &[&str]) -> Vec<Vec<u8>> {
    paths.iter().map(|p| fs::read(p).unwrap()).collect()
}

/// First clip of the test split, stored as a patch file.
fn clip_file(dir: &TempDir, data: &str) -> String {
    let ds = tinysed::data::load_dataset(data).unwrap();
    let patches = &ds.test[0].patches;
    let shape = [vec![patches.len()], patches[0].shape().to_vec()].concat();
    let flat = patches.iter().flat_map(|t| t.data().to_vec()).collect();
    let path = p(dir, "clip.tsed");
    save_tensors(&path, &[NamedTensor::f32("patches", Tensor::new(shape, flat).unwrap())]).unwrap();
    path
}

#[test]
fn full_pipeline() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "data.tsed");
    ok(&["--seed", "3", "synth-data", "-o", &data, "--per-class", "10"]);

    let teacher = p(&dir, "teacher.tsed");
    let curve = p(&dir, "teacher.csv");
    let fast = ["--epochs", "2", "--lr", "0.05", "--batch-size", "8"];
    let mut args = vec!["train", "--arch", "toy_teacher", "--data", &data, "-o", &teacher, "--curve", &curve];
    args.extend(fast);
    ok(&args);
    let csv = fs::read_to_string(&curve).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_loss,val_accuracy\n"));
    assert_eq!(csv.lines().count(), 3);

    let student = p(&dir, "student.tsed");
    let mut args = vec!["--json", "distill", "--teacher", &teacher, "--student", "toy_student", "--data", &data];
    args.extend(["-o", &student, "--strategy", "Thse"]);
    args.extend(fast);
    let before = digest(&[&teacher, &data]);
    let summary: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(summary["stages"].as_array().unwrap().len(), 1);
    assert_eq!(digest(&[&teacher, &data]), before);

    let two = p(&dir, "two.tsed");
    let two_curve = p(&dir, "two.csv");
    let mut args = vec!["distill2", "--teacher", &teacher, "--intermediate", "toy_teacher", "--student", "toy_student"];
    args.extend(["--data", &data, "-o", &two, "--alpha-h", "1", "--alpha-s", "1", "--curve", &two_curve]);
    args.extend(fast);
    ok(&args);
    let csv = fs::read_to_string(&two_curve).unwrap();
    assert!(csv.starts_with("stage,epoch,"));
    assert_eq!(csv.lines().count(), 5);

    let plan = p(&dir, "plan.json");
    ok(&["calibrate", "--model", &student, "--data", &data, "--scheme", "overload", "--p-th", "1e-4", "-o", &plan]);
    let parsed: QuantPlan = serde_json::from_str(&fs::read_to_string(&plan).unwrap()).unwrap();
    assert!(parsed.layers.iter().all(|l| !l.name.starts_with("bn")));

    let q_plan = p(&dir, "q_plan.tsed");
    let q_data = p(&dir, "q_data.tsed");
    ok(&["quantize", "--model", &student, "--plan", &plan, "-o", &q_plan]);
    ok(&["quantize", "--model", &student, "--data", &data, "--scheme", "overload", "-o", &q_data]);
    assert_eq!(fs::read(&q_plan).unwrap(), fs::read(&q_data).unwrap());

    let r: CompareReport =
        serde_json::from_str(&ok(&["--json", "compare", "--model", &student, "--qmodel", &q_plan, "--data", &data]))
            .unwrap();
    assert!(r.samples > 0 && (0.0..=1.0).contains(&r.agreement));

    let clip = clip_file(&dir, &data);
    let text = ok(&["infer", &clip, "--float", &student, "--int8", &q_plan]);
    assert!(
        text.contains("float predicted class")
            && text.contains("int8  predicted class")
            && text.contains("max logit gap"),
        "{text}"
    );
    let v: serde_json::Value = serde_json::from_str(&ok(&["--json", "infer", &clip, "--int8", &q_plan])).unwrap();
    assert!(v["float"].is_null() && v["int8"]["predicted"].as_u64().unwrap() < 10);

    let header = p(&dir, "model.h");
    ok(&["export", "--qmodel", &q_plan, "-o", &header]);
    assert!(fs::read_to_string(&header).unwrap().contains("int8_t"));
}

#[test]
fn training_is_seeded() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "data.tsed");
    ok(&["synth-data", "-o", &data, "--per-class", "6"]);
    let run = |seed: &str, name: &str| -> PathBuf {
        let out = p(&dir, name);
        ok(&["--seed", seed, "train", "--arch", "toy_student", "--data", &data, "-o", &out, "--epochs", "1"]);
        PathBuf::from(out)
    };
    let (a, b, c) = (run("5", "a.tsed"), run("5", "b.tsed"), run("6", "c.tsed"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn train_config_file_and_teacher_requirement() {
    let dir = TempDir::new().unwrap();
    let data = p(&dir, "data.tsed");
    ok(&["synth-data", "-o", &data, "--per-class", "6"]);
    let cfg = p(&dir, "cfg.json");
    fs::write(&cfg, r#"{"learning_rate":0.01,"epochs":1,"batch_size":4,"seed":0,"patience":0}"#).unwrap();
    let out = p(&dir, "m.tsed");
    let summary: serde_json::Value = serde_json::from_str(&ok(&[
        "--json",
        "train",
        "--arch",
        "toy_student",
        "--data",
        &data,
        "-o",
        &out,
        "--config",
        &cfg,
    ]))
    .unwrap();
    assert_eq!(summary["stages"][0]["curve"].as_array().unwrap().len(), 1);
    assert_eq!(code(&["train", "--arch", "toy_student", "--data", &data, "-o", &out, "--strategy", "Ths"]), 2);
    assert_eq!(
        code(&["train", "--arch", "toy_student", "--data", &data, "-o", &out, "--strategy", "Th", "--alpha-h", "1"]),
        2
    );
    assert_eq!(code(&["train", "--arch", "toy_student", "--data", &data, "-o", &out, "--strategy", "Tx"]), 2);
    assert_eq!(code(&["train", "--arch", "toy_student", "--data", &data, "-o", &out, "--lr", "-1"]), 2);
}
