use std::path::Path;
use std::process::{Command, Output};

use uncanny_core::compositing::{fixture_face, Mask};
use uncanny_core::generators::{clone_for_finetune, Generator, GeneratorConfig};
use uncanny_core::imaging::{load_image, save_image};
use uncanny_core::{DType, Device};

fn uncanny(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uncanny"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn envelope(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error envelope on stderr");
    serde_json::from_str(line).expect("the last stderr line is JSON")
}

fn toy_pair(path: &Path) {
    let g = Generator::new(GeneratorConfig::toy(), 11, &Device::Cpu, DType::F32).unwrap();
    clone_for_finetune(&g).unwrap().save(path).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const QUICK: [&str; 4] = ["--set", "inversion.mean_samples=256", "--steps", "4"];

#[test]
fn realify_writes_image_latent_and_report_row() {
    let dir = tempfile::tempdir().unwrap();
    let pair = dir.path().join("pair.ckpt");
    toy_pair(&pair);
    let input = dir.path().join("in");
    std::fs::create_dir_all(&input).unwrap();
    save_image(&fixture_face(64).0, input.join("face.png")).unwrap();
    let out = dir.path().join("out");

    let mut args = vec!["realify", "--input", s(&input), "--pair", s(&pair), "--out", s(&out)];
    args.extend(QUICK);
    let run = uncanny(&args);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));

    assert!(out.join("face.png").is_file());
    assert!(out.join("face.latent").is_file());
    assert!(out.join("resolved_config.toml").is_file());
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("face,"), "{}", rows[0]);
    assert!(rows[0].contains(",ok,"));
    let resolved = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("steps = 4"));
}

#[test]
fn realify_with_an_unreadable_image_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let pair = dir.path().join("pair.ckpt");
    toy_pair(&pair);
    let input = dir.path().join("in");
    std::fs::create_dir_all(&input).unwrap();
    save_image(&fixture_face(64).0, input.join("good.png")).unwrap();
    std::fs::write(input.join("bad.png"), b"not a png").unwrap();
    let out = dir.path().join("out");

    let mut args = vec!["realify", "--input", s(&input), "--pair", s(&pair), "--out", s(&out)];
    args.extend(QUICK);
    let run = uncanny(&args);
    assert_eq!(run.status.code(), Some(7));
    let env = envelope(&run);
    assert_eq!(env["code"], "partial_failure");
    assert_eq!(env["context"]["failed"][0], "bad");
    assert!(out.join("good.png").is_file());
}

#[test]
fn missing_input_exits_4_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let run = uncanny(&["realify", "--input", s(&missing), "--pair", "p", "--out", "o"]);
    assert_eq!(run.status.code(), Some(4));
    let env = envelope(&run);
    assert_eq!(env["code"], "missing_input");
    assert_eq!(env["context"]["command"], "realify");
    assert_eq!(env["context"]["path"], s(&missing));
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    let run = uncanny(&["frobnicate"]);
    assert_eq!(run.status.code(), Some(2));
    assert_eq!(envelope(&run)["code"], "usage");
    assert_eq!(uncanny(&["config", "--set", "novalue"]).status.code(), Some(2));
    let help = uncanny(&["--help"]);
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("realify"));
}

#[test]
fn config_errors_exit_3() {
    let run = uncanny(&["config", "--set", "inversion.stepz=3"]);
    assert_eq!(run.status.code(), Some(3));
    assert_eq!(envelope(&run)["code"], "config");
    assert_eq!(
        uncanny(&["config", "--set", "inversion.steps=\"many\""]).status.code(),
        Some(3)
    );
}

#[test]
fn corrupt_checkpoint_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let pair = dir.path().join("pair.ckpt");
    std::fs::write(&pair, b"garbage").unwrap();
    let input = dir.path().join("in");
    std::fs::create_dir_all(&input).unwrap();
    save_image(&fixture_face(64).0, input.join("face.png")).unwrap();
    let out = dir.path().join("out");
    let run = uncanny(&["realify", "--input", s(&input), "--pair", s(&pair), "--out", s(&out)]);
    assert_eq!(run.status.code(), Some(5), "{}", String::from_utf8_lossy(&run.stderr));
}

#[test]
fn flags_override_set_which_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.toml");
    std::fs::write(
        &file,
        "jobs = 1\n[inversion]\nsteps = 300\nseed = 9\nlambda_noise = 7.0\n",
    )
    .unwrap();
    let run = uncanny(&[
        "config",
        "--config",
        s(&file),
        "--set",
        "inversion.steps=40",
        "--set",
        "inversion.seed=2",
    ]);
    assert!(run.status.success());
    let cfg: toml::Table = toml::from_str(&String::from_utf8_lossy(&run.stdout)).unwrap();
    let inv = cfg["inversion"].as_table().unwrap();
    assert_eq!(inv["steps"].as_integer(), Some(40));
    assert_eq!(inv["seed"].as_integer(), Some(2));
    assert_eq!(inv["lambda_noise"].as_float(), Some(7.0));
    assert_eq!(inv["lr_base"].as_float(), Some(0.1));
    assert_eq!(cfg["jobs"].as_integer(), Some(1));

    let run = uncanny(&["config", "--config", s(&file), "--jobs", "3"]);
    let cfg: toml::Table = toml::from_str(&String::from_utf8_lossy(&run.stdout)).unwrap();
    assert_eq!(cfg["jobs"].as_integer(), Some(3));
}

#[test]
fn composite_with_a_mask_keeps_unmasked_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let (face, seg) = fixture_face(64);
    let original = dir.path().join("orig.png");
    let generated = dir.path().join("gen.png");
    save_image(&face, &original).unwrap();
    let mut negated = face.clone();
    negated.data_mut().iter_mut().for_each(|v| *v = -*v);
    save_image(&negated, &generated).unwrap();
    let masks = dir.path().join("masks");
    seg.save_dir(&masks).unwrap();
    let out = dir.path().join("out.png");
    let soft = dir.path().join("soft.png");
    let run = uncanny(&[
        "composite",
        "--original",
        s(&original),
        "--generated",
        s(&generated),
        "--masks",
        s(&masks),
        "--mask-classes",
        "skin",
        "--out",
        s(&out),
        "--mask-out",
        s(&soft),
    ]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(out.is_file() && soft.is_file());
    assert!(dir.path().join("out.png.resolved.toml").is_file());

    let (orig, blended) = (load_image(&original).unwrap(), load_image(&out).unwrap());
    let m = Mask::load(&soft).unwrap();
    let mut outside = 0;
    for r in 0..64 {
        for c in 0..64 {
            if m.get(r, c) == 0.0 {
                outside += 1;
                for ch in 0..3 {
                    assert_eq!(blended.get(ch, r, c), orig.get(ch, r, c));
                }
            }
        }
    }
    assert!(outside > 0);
}
