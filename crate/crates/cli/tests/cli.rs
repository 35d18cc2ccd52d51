use std::path::Path;
use std::process::{Command, Output};

fn sail(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sail"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&sail(&["frobnicate"], d)), 2);
    assert_eq!(code(&sail(&["run", "--preset", "abrupt", "--no-such-flag"], d)), 2);
    assert_eq!(code(&sail(&["run", "--preset", "nope"], d)), 2);
    assert_eq!(code(&sail(&["run"], d)), 2);
    assert_eq!(code(&sail(&["run", "--config", "missing.toml"], d)), 2);
    assert_eq!(code(&sail(&["run", "--preset", "abrupt", "--alpha", "150"], d)), 2);
    std::fs::write(d.join("bad.toml"), "lr = 0.1\nmystery = 3\n").unwrap();
    let o = sail(&["run", "--config", "bad.toml"], d);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.toml"));
}

#[test]
fn degenerate_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("flat.logits"), "a,0,1.0,1.0,1.0\n").unwrap();
    let args = ["replay", "--vlm-logits", "flat.logits", "--ada-logits", "flat.logits", "--normalization"];
    let o = sail(&[&args[..], &["min-max"]].concat(), d);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("max equals min"));
    assert_eq!(code(&sail(&[&args[..], &["lse"]].concat(), d)), 0);
}

#[test]
fn replay_help_documents_the_logits_format() {
    let dir = tempfile::tempdir().unwrap();
    let o = sail(&["replay", "--help"], dir.path());
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("sample_id \",\" label"));
    assert!(text.contains("joined by sample id"));
}

#[test]
fn run_writes_csv_summary_and_events() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let preset = sail(&["preset", "recurring"], d);
    std::fs::write(d.join("golden.toml"), stdout(&preset)).unwrap();
    let o = sail(&["run", "--config", "golden.toml", "--seed", "2022", "--out-dir", "out"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("out/recurring-seed2022.csv")).unwrap();
    assert!(csv.starts_with("step,domain_id,acc_fused,acc_vlm,acc_ada,lambda_mean,loss_align,loss_balance,loss_ent,loss_total,gdi,reset_flag\n"));
    assert_eq!(csv.lines().count(), 121);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/recurring-seed2022.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 120);
    let events = std::fs::read_to_string(d.join("out/recurring-seed2022-events.jsonl")).unwrap();
    assert_eq!(events.lines().count() as u64, summary["resets"].as_u64().unwrap());

    let o = sail(&["run", "--preset", "recurring", "--seed", "2022", "--out-dir", "again"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(d.join("again/recurring-seed2022.csv")).unwrap(), csv.as_bytes());
}

#[test]
fn pretrained_artifacts_reproduce_the_fresh_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for enc in ["text", "binary"] {
        let art = format!("art-{enc}");
        let o = sail(&["pretrain", "--preset", "abrupt", "--seed", "2023", "--out-dir", &art, "--encoding", enc], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let o = sail(
            &[
                "run", "--preset", "abrupt", "--seed", "2023", "--out-dir", &format!("with-{enc}"),
                "--adapter", &format!("{art}/adapter-2023.snap"),
                "--generalist", &format!("{art}/generalist-2023.json"),
            ],
            d,
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = sail(&["run", "--preset", "abrupt", "--seed", "2023", "--out-dir", "fresh"], d);
    assert_eq!(code(&o), 0);
    let fresh = std::fs::read(d.join("fresh/abrupt-seed2023.csv")).unwrap();
    for enc in ["text", "binary"] {
        assert_eq!(std::fs::read(d.join(format!("with-{enc}/abrupt-seed2023.csv"))).unwrap(), fresh, "{enc}");
    }
}

#[test]
fn gen_stream_logits_feed_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = sail(&["gen-stream", "--preset", "corruption", "--seed", "2024", "--out", "s.csv", "--logits-dir", "lg"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stream = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert_eq!(stream.lines().count(), 1 + 150 * 64);
    assert!(stream.lines().next().unwrap().starts_with("step,sample,domain_id,label,x0,"));

    let o = sail(
        &["replay", "--vlm-logits", "lg/adapter.logits", "--ada-logits", "lg/adapter.logits", "--json", "r.json"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["acc_fused"], r["acc_ada"]);
    assert!(r["lambdas"].as_array().unwrap().iter().all(|l| l.as_f64() == Some(0.5)));

    let o = sail(&["replay", "--vlm-logits", "lg/generalist.logits", "--ada-logits", "lg/adapter.logits"], d);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("samples 9600"));

    std::fs::write(d.join("broken.logits"), "a,0,1.0\n").unwrap();
    let o = sail(&["replay", "--vlm-logits", "broken.logits", "--ada-logits", "broken.logits"], d);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken.logits:1"));
}

#[test]
fn ablate_prints_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = sail(&["ablate", "--preset", "corruption", "--seeds", "2022", "--json", "t.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for row in ["(1) No Backward", "(2)", "(3)", "(4)", "(5) SAIL"] {
        assert!(text.contains(row), "{text}");
    }
    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
    assert_eq!(t["cells"].as_array().unwrap().len(), 8);
}

#[test]
fn sweep_and_analyze_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = sail(&["sweep", "--preset", "abrupt", "--seeds", "2022", "--axis", "interval", "--values", "5,10"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("s=5") && stdout(&o).contains("s=10"));
    let o = sail(&["sweep", "--preset", "abrupt", "--axis", "colour", "--values", "red"], d);
    assert_eq!(code(&o), 2);

    let o = sail(&["analyze", "--preset", "recurring", "--seed", "2022", "--out-dir", "a"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(d.join("a/recurring-seed2022-correlations.csv")).unwrap();
    let total: usize = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 120 * 64);
    let scatter = std::fs::read_to_string(d.join("a/recurring-seed2022-scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 1 + 120 * 64);
}
