use std::process::Command;

fn kvchain() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kvchain"))
}

#[test]
fn verify_passes_on_a_fresh_checkout() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvchain().args(["verify", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(!stdout.contains("FAIL"));
    assert!(dir.path().join("verify.json").exists());
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn missing_prompt_checkpoint_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    let missing = dir.path().join("nowhere.kvp");
    std::fs::write(&cfg, serde_json::json!({ "prompts": [missing] }).to_string()).unwrap();
    let out = kvchain().args(["run", "--mode", "fthss", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    let record: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(record["error"], "missing_file");
    assert_eq!(record["path"], missing.to_str().unwrap());
}

#[test]
fn unknown_mode_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvchain().args(["run", "--mode", "sideways", "--out"]).arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["error"], "config");
}

#[test]
fn gen_is_byte_identical_and_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"n": 8, "seed": 5, "task": "multi-round"}"#).unwrap();
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = kvchain().args(["gen", "--seed", "9", "--config"]).arg(&cfg).arg("--out").arg(&out_dir).output().unwrap();
        assert!(out.status.success());
        let resolved: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
        assert_eq!(resolved["seed"], 9);
        assert_eq!(resolved["n"], 8);
        files.push(std::fs::read(out_dir.join("data.jsonl")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(String::from_utf8_lossy(&files[0]).lines().count(), 8);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvchain()
        .env("KVCHAIN_OUT", dir.path())
        .args(["gen", "--config", "/dev/stdin"])
        .stdin(std::process::Stdio::null())
        .output()
        .unwrap();
    // An empty config file is not valid JSON.
    assert_eq!(out.status.code(), Some(3));
    let out = kvchain().env("KVCHAIN_OUT", dir.path()).arg("gen").output().unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("gen").join("data.jsonl").exists());
}
