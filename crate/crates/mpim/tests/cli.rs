//! End-to-end tests of the `mpim` binary: exit codes, file outputs, and
//! report contents, using the bundled demo model and image.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn mpim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_str(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("expected JSON, got error {e}\nstdout: {}", stdout_str(out)))
}

/// Quantizes the bundled demo model into `dir`, returning the manifest path.
fn quantize_demo(dir: &Path) -> PathBuf {
    let manifest = dir.join("demo-q.json");
    let out = mpim(&[
        "quantize",
        repo_path("models/demo.json").to_str().unwrap(),
        manifest.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "quantize failed: {}",
        stderr_str(&out)
    );
    manifest
}

#[test]
fn quantize_missing_weights_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("model.json");
    std::fs::write(
        &manifest,
        r#"{
  "version": 1,
  "name": "broken",
  "layers": [
    {"in_ch": 1, "out_ch": 1, "pool": false, "act": "relu", "bias": [0.0]}
  ],
  "weights_f32": "nowhere.bin"
}
"#,
    )
    .unwrap();
    let out = mpim(&[
        "quantize",
        manifest.to_str().unwrap(),
        dir.path().join("q.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_str(&out).contains("nowhere.bin"),
        "stderr: {}",
        stderr_str(&out)
    );
}

#[test]
fn quantize_twice_writes_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = quantize_demo(&dir.path().join_and_create("a"));
    let b = quantize_demo(&dir.path().join_and_create("b"));
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        "manifests differ"
    );
    assert_eq!(
        std::fs::read(a.with_file_name("demo-q.weights.bin")).unwrap(),
        std::fs::read(b.with_file_name("demo-q.weights.bin")).unwrap(),
        "blobs differ"
    );
}

trait JoinAndCreate {
    fn join_and_create(&self, sub: &str) -> PathBuf;
}

impl JoinAndCreate for Path {
    fn join_and_create(&self, sub: &str) -> PathBuf {
        let p = self.join(sub);
        std::fs::create_dir_all(&p).unwrap();
        p
    }
}

#[test]
fn run_demo_image_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = quantize_demo(dir.path());
    let out_path = dir.path().join("out.fmap");

    let out = mpim(&[
        "run",
        "-m",
        manifest.to_str().unwrap(),
        "--input",
        repo_path("images/gradient.ppm").to_str().unwrap(),
        "--output",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "run failed: {}", stderr_str(&out));
    let text = stdout_str(&out);
    assert!(text.contains("9.9 TOPS/W"), "stdout: {text}");
    assert!(text.contains("not from measured timing"), "stdout: {text}");

    // 28x28 input through two pooled layers of 8 channels: 8x7x7 out
    let bytes = std::fs::read(&out_path).unwrap();
    assert_eq!(&bytes[..4], b"FMAP");
    let dim = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    assert_eq!((dim(4), dim(8), dim(12)), (8, 7, 7));
    assert_eq!(bytes.len(), 16 + 8 * 7 * 7 * 4);

    // identical flags, identical bytes
    let again_path = dir.path().join("again.fmap");
    let again = mpim(&[
        "run",
        "-m",
        manifest.to_str().unwrap(),
        "--input",
        repo_path("images/gradient.ppm").to_str().unwrap(),
        "--output",
        again_path.to_str().unwrap(),
    ]);
    assert!(again.status.success());
    assert_eq!(bytes, std::fs::read(&again_path).unwrap());
}

#[test]
fn run_reports_the_memory_kind_efficiency() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = quantize_demo(dir.path());
    let input = repo_path("images/gradient.ppm");

    let sram = mpim(&[
        "run",
        "-m",
        manifest.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--memory",
        "sram",
        "--format",
        "json",
    ]);
    assert!(sram.status.success(), "{}", stderr_str(&sram));
    let v = json(&sram);
    assert_eq!(v["power"]["effective_tops_w"].as_f64().unwrap(), 9.3);

    let mram = mpim(&[
        "run",
        "-m",
        manifest.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--format",
        "json",
    ]);
    let v = json(&mram);
    assert_eq!(v["power"]["effective_tops_w"].as_f64().unwrap(), 9.92);
    assert_eq!(v["jobs"][0]["channels"].as_u64().unwrap(), 8);
}

#[test]
fn multi_model_run_matches_solo_runs() {
    let dir = tempfile::tempdir().unwrap();

    // demo, plus a variant with halved weights under a different name
    let demo_manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(repo_path("models/demo.json")).unwrap()).unwrap();
    let mut variant = demo_manifest.clone();
    variant["name"] = "variant".into();
    variant["weights_f32"] = "variant.bin".into();
    let weights = std::fs::read(repo_path("models/demo.weights_f32.bin")).unwrap();
    let halved: Vec<u8> = weights
        .chunks_exact(4)
        .flat_map(|q| (f32::from_le_bytes([q[0], q[1], q[2], q[3]]) * 0.5).to_le_bytes())
        .collect();
    let variant_float = dir.path().join("variant.json");
    std::fs::write(&variant_float, serde_json::to_vec_pretty(&variant).unwrap()).unwrap();
    std::fs::write(dir.path().join("variant.bin"), &halved).unwrap();

    let q_demo = quantize_demo(dir.path());
    let q_variant = dir.path().join("variant-q.json");
    let out = mpim(&[
        "quantize",
        variant_float.to_str().unwrap(),
        q_variant.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_str(&out));

    let input = repo_path("images/gradient.ppm");
    let multi_base = dir.path().join("multi.fmap");
    let out = mpim(&[
        "run",
        "-m",
        q_demo.to_str().unwrap(),
        "-m",
        q_variant.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--output",
        multi_base.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_str(&out));

    for (manifest, id) in [(&q_demo, "demo"), (&q_variant, "variant")] {
        let solo_path = dir.path().join(format!("solo-{id}.fmap"));
        let solo = mpim(&[
            "run",
            "-m",
            manifest.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--output",
            solo_path.to_str().unwrap(),
        ]);
        assert!(solo.status.success(), "{}", stderr_str(&solo));
        let multi_path = dir.path().join(format!("multi.{id}.fmap"));
        assert_eq!(
            std::fs::read(&multi_path).unwrap(),
            std::fs::read(&solo_path).unwrap(),
            "{id} multi-model output differs from its solo run"
        );
    }
}

#[test]
fn duplicate_model_ids_fail_at_execution() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = quantize_demo(dir.path());
    let out = mpim(&[
        "run",
        "-m",
        manifest.to_str().unwrap(),
        "-m",
        manifest.to_str().unwrap(),
        "--input",
        repo_path("images/gradient.ppm").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_str(&out).contains("already resident"));
}

#[test]
fn power_prints_the_measured_table() {
    let room = mpim(&["power", "--temp", "room"]);
    assert!(room.status.success());
    let text = stdout_str(&room);
    for needle in ["38.3 mW", "5.5 mW", "39.2 mW", "34.3 mW", "0.9375", "4.44"] {
        assert!(text.contains(needle), "missing {needle} in: {text}");
    }

    let high = mpim(&["power", "--temp", "high"]);
    let text = stdout_str(&high);
    for needle in ["35.4 mW", "7.2 mW", "43.1 mW", "136 mW"] {
        assert!(text.contains(needle), "missing {needle} in: {text}");
    }
}

#[test]
fn power_rejects_unknown_temperature_and_preset() {
    let out = mpim(&["power", "--temp", "lava"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mpim(&["power", "--preset", "no-such-preset"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_str(&out).contains("no-such-preset"));
}

#[test]
fn preset_dir_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = serde_json::json!({
        "dynamic_mw": {"mram_room": 1.0, "mram_high": 2.0, "sram_room": 3.0, "sram_high": 4.0},
        "standby_mw": {"mram_room": 0.5, "mram_high": 0.6, "sram_room": 0.7, "sram_high": 0.8},
        "vdd_volts": 1.1,
        "vdio_volts": 1.8,
        "base_efficiency_tops_w": 4.0,
        "coeff_power_fraction": 0.5,
        "rest_power_fraction": 0.5,
        "ivdd_ratio_mram_vs_sram": 0.5,
        "clock_hz": 1.0e6
    });
    std::fs::write(
        dir.path().join("lab.json"),
        serde_json::to_vec(&cfg).unwrap(),
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mpim"))
        .args(["power", "--preset", "lab", "--format", "json"])
        .env("MPIM_PRESET_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_str(&out));
    let v = json(&out);
    assert_eq!(v["mram_dynamic_mw"].as_f64().unwrap(), 1.0);
    // 4.0 / (0.5 + 0.5 * 0.5) = 5.333...
    let eff = v["effective_tops_w"].as_f64().unwrap();
    assert!((eff - 4.0 / 0.75).abs() < 1e-12, "eff {eff}");
    // mutate to an invalid preset: fractions that do not sum to one
    cfg["coeff_power_fraction"] = 0.6.into();
    std::fs::write(
        dir.path().join("bad.json"),
        serde_json::to_vec(&cfg).unwrap(),
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mpim"))
        .args(["power", "--preset", "bad"])
        .env("MPIM_PRESET_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_zero_frames_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = quantize_demo(dir.path());
    let out = mpim(&["bench", "-m", manifest.to_str().unwrap(), "--frames", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_str(&out).contains("frames"));
}

#[test]
fn bench_override_pins_the_frame_rate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = quantize_demo(dir.path());
    let out = mpim(&[
        "bench",
        "-m",
        manifest.to_str().unwrap(),
        "--frames",
        "1",
        "--cycles-override",
        "357142",
    ]);
    assert!(out.status.success(), "{}", stderr_str(&out));
    let text = stdout_str(&out);
    assert!(text.contains("35.0"), "stdout: {text}");
    assert!(text.contains("(overridden)"), "stdout: {text}");
}

#[test]
fn bench_fps_scales_with_the_clock() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = quantize_demo(dir.path());
    let run_at = |hz: &str| {
        let out = mpim(&[
            "bench",
            "-m",
            manifest.to_str().unwrap(),
            "--frames",
            "1",
            "--clock-hz",
            hz,
            "--format",
            "json",
        ]);
        assert!(out.status.success(), "{}", stderr_str(&out));
        json(&out)["fps"].as_f64().unwrap()
    };
    let base = run_at("12500000");
    let doubled = run_at("25000000");
    assert!(
        (doubled / base - 2.0).abs() < 1e-9,
        "fps {base} -> {doubled}"
    );
}

#[test]
fn fmap_input_flows_through_the_device() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = quantize_demo(dir.path());

    // 3x8x8 tensor with a simple ramp
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"FMAP");
    for dim in [3u32, 8, 8] {
        bytes.extend_from_slice(&dim.to_le_bytes());
    }
    for i in 0..3 * 8 * 8 {
        bytes.extend_from_slice(&((i % 32) as f32 / 32.0).to_le_bytes());
    }
    let input = dir.path().join("ramp.fmap");
    std::fs::write(&input, &bytes).unwrap();

    let out = mpim(&[
        "run",
        "-m",
        manifest.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert!(out.status.success(), "{}", stderr_str(&out));
    let v = json(&out);
    assert_eq!(v["jobs"][0]["channels"].as_u64().unwrap(), 8);
    assert_eq!(v["jobs"][0]["height"].as_u64().unwrap(), 2);
    assert_eq!(v["jobs"][0]["width"].as_u64().unwrap(), 2);
}

#[test]
fn garbage_input_is_rejected_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = quantize_demo(dir.path());
    let input = dir.path().join("noise.bin");
    std::fs::write(&input, b"not an image at all").unwrap();
    let out = mpim(&[
        "run",
        "-m",
        manifest.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_str(&out).contains("unrecognized input format"));
}
