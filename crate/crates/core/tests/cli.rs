use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rowguard"))
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

#[test]
fn analyze_writes_a_report() {
    let out = tempfile::tempdir().unwrap();
    let st = bin()
        .arg("--config")
        .arg(configs().join("default.toml"))
        .arg("--out")
        .arg(out.path())
        .arg("analyze")
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let csv = std::fs::read_to_string(out.path().join("analysis.csv")).unwrap();
    assert!(csv.starts_with("# rowguard-report v1 seed=1 "));
    assert!(csv.lines().any(|l| l == "t_swap_ns,270"));
}

#[test]
fn bad_configs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("default.toml")).unwrap();
    let text = text.replace("../data", &configs().join("../data").display().to_string());
    let cases = [
        ("unknown.toml", format!("{text}\n[extra]\nk = 1\n")),
        ("noversion.toml", text.replacen("format_version = 1", "", 1)),
    ];
    for (name, body) in cases {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        let st = bin().arg("--config").arg(&p).arg("analyze").output().unwrap();
        assert_eq!(st.status.code(), Some(2), "{name}");
    }
    let st = bin()
        .arg("--config")
        .arg(dir.path().join("absent.toml"))
        .arg("analyze")
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));
}
