use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cup")).args(args).output().expect("cup runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

const OOB: &str = "func main() {\n  p = malloc 8\n  q = ptr_add p, 8\n  store 1 q, 1\n  ret 0\n}\n";

#[test]
fn run_exit_codes_follow_the_guest() {
    let dir = tempfile::tempdir().unwrap();
    let ok = write(dir.path(), "ok.mir", "func main() {\n  @print_int(7)\n  ret 0\n}\n");
    let out = cup(&["run", &ok]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "7\n");

    let three = write(dir.path(), "three.mir", "func main(a: i64) {\n  ret a\n}\n");
    assert_eq!(cup(&["run", &three, "--args", "3"]).status.code(), Some(1));
}

#[test]
fn instrumented_overflow_exits_42_with_json_fault() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "oob.mir", OOB);
    let inst = dir.path().join("oob.inst.mir").display().to_string();
    assert!(cup(&["instrument", &src, "-o", &inst, "--mode", "expanded"]).status.success());
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(format!("{inst}.prov.json")).unwrap()).unwrap();
    assert!(!prov["groups"].as_array().unwrap().is_empty());

    let out = cup(&["run", &inst]);
    assert_eq!(out.status.code(), Some(42));
    let fault: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(fault["kind"], "hardware_fault");
    // Re-parsing the printed module renumbers sites; the address is stable.
    assert!(fault["addr"].as_u64().unwrap() >= 1 << 48);

    // Uninstrumented, the write lands in allocator slack.
    assert_eq!(cup(&["run", &src]).status.code(), Some(0));
}

#[test]
fn trace_file_records_metadata_events() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "oob.mir", OOB);
    let inst = dir.path().join("i.mir").display().to_string();
    assert!(cup(&["instrument", &src, "-o", &inst, "--mode", "intrinsic"]).status.success());
    let trace = dir.path().join("t.json").display().to_string();
    cup(&["run", &inst, "--trace", &trace]);
    let events: serde_json::Value = serde_json::from_str(&fs::read_to_string(&trace).unwrap()).unwrap();
    let kinds: Vec<_> = events.as_array().unwrap().iter().map(|e| e["event"].as_str().unwrap().to_string()).collect();
    assert!(kinds.contains(&"alloc_meta".to_string()));
    assert!(kinds.contains(&"check".to_string()));
}

#[test]
fn validate_reports_errors_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.mir", "func f() {\n  ret x\n}\n");
    let out = cup(&["validate", &bad]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("undefined register `x`"), "{err}");
    assert!(err.contains("no `main`"), "{err}");
}

#[test]
fn generate_then_harness_passes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("gen");
    let c = corpus.display().to_string();
    assert!(cup(&["generate", "--out", &c, "--seed", "5", "--count", "6"]).status.success());
    assert_eq!(fs::read_dir(&corpus).unwrap().count(), 6);
    let report = dir.path().join("r.json").display().to_string();
    let out = cup(&["harness", &c, "--mode", "intrinsic", "--report", &report, "--bench-checks", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["cases"], 6);
    assert_eq!(r["counts"]["FP"], 0);
    assert_eq!(r["counts"]["FN"], 0);
}

#[test]
fn harness_fails_on_a_false_negative_case() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("c/wrong");
    fs::create_dir_all(&case).unwrap();
    // Raw integer addressing hides the overflow from the sanitizer.
    let buggy = "func main() {\n  p = malloc 8\n  i = ptr_to_int p\n  j = add i, 8\n  q = int_to_ptr j\n  store 1 q, 1\n  ret 0\n}\n";
    fs::write(case.join("buggy.mir"), buggy).unwrap();
    fs::write(case.join("patched.mir"), "func main() {\n  p = malloc 8\n  ret 0\n}\n").unwrap();
    fs::write(case.join("expect.json"), r#"{"violation_kind":"spatial_over","region":"heap"}"#).unwrap();
    let out = cup(&["harness", &dir.path().join("c").display().to_string(), "--bench-checks", "0"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn bad_generator_params_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = cup(&["generate", "--out", &dir.path().display().to_string(), "--n-objects", "0"]);
    assert_eq!(out.status.code(), Some(2));
}
