use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn enav(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enav"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SPEC: &str = r#"sensor AHU1_supply : "°C" @ 15min;
sensor AHU1_return : "°C" @ 15min;
rule heating_circuit(vl, rl) = vl - rl >= 5;
apply heating_circuit as hc1 with (vl = AHU1_supply, rl = AHU1_return);
"#;

fn data() -> String {
    let mut out = String::from("timestamp,point,value\n");
    for i in 0..96 {
        let t = chrono::DateTime::from_timestamp(1_704_067_200 + i * 900, 0).unwrap().format("%Y-%m-%dT%H:%M:%SZ");
        let (s, r) = if (40..52).contains(&i) { (500, 480) } else { (600, 450) };
        out.push_str(&format!("{t},P1,{s}\n{t},P2,{r}\n{t},P9,1\n"));
    }
    out
}

fn workspace(dir: &Path) {
    fs::create_dir_all(dir.join("spec")).unwrap();
    fs::write(dir.join("spec/heating.afs"), SPEC).unwrap();
    fs::write(dir.join("data.csv"), data()).unwrap();
    fs::write(
        dir.join("map.json"),
        r#"{"P1": {"sensor": "AHU1_supply", "scale": 0.1}, "P2": {"sensor": "AHU1_return", "scale": 0.1}}"#,
    )
    .unwrap();
}

#[test]
fn check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    workspace(dir.path());
    let ok = enav(dir.path(), &["check"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(ok.stdout.is_empty() && ok.stderr.is_empty());

    fs::write(dir.path().join("cycle.afs"), "rule A() = B;\nrule B() = A;\n").unwrap();
    let cyc = enav(dir.path(), &["check", dir.path().join("cycle.afs").to_str().unwrap()]);
    assert_eq!(code(&cyc), 1);
    assert!(stderr(&cyc).contains("A -> B -> A"), "{}", stderr(&cyc));
    assert!(stderr(&cyc).contains("cycle.afs:1:"), "{}", stderr(&cyc));

    let missing = enav(dir.path(), &["check", "does/not/exist.afs"]);
    assert_eq!(code(&missing), 2);

    fs::write(dir.path().join("bad.afs"), "rule r(a) = a > ;\n").unwrap();
    let bad = enav(dir.path(), &["check", dir.path().join("bad.afs").to_str().unwrap()]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("bad.afs:1:15"), "{}", stderr(&bad));
}

#[test]
fn empty_workspace_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let o = enav(dir.path(), &["run", "--from", "2024-01-01", "--to", "2024-01-02"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn full_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    workspace(ws);

    let imp = enav(ws, &["import", ws.join("data.csv").to_str().unwrap(), "--map", ws.join("map.json").to_str().unwrap()]);
    assert_eq!(code(&imp), 0, "{}", stderr(&imp));
    assert!(stdout(&imp).contains("288 rows: 192 accepted, 0 rejected, 96 skipped"), "{}", stdout(&imp));
    assert!(stderr(&imp).contains("unmapped point `P9`"));

    let raw = enav(ws, &["export", "AHU1_supply", "--from", "2024-01-01", "--to", "2024-01-02", "--raw"]);
    assert_eq!(code(&raw), 0);
    assert!(stdout(&raw).starts_with("timestamp,point,value\n2024-01-01T00:00:00Z,AHU1_supply,60\n"), "{}", stdout(&raw));

    let run = enav(ws, &["run", "--from", "2024-01-01T00:00:00Z", "--to", "2024-01-02T00:00:00Z"]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    assert!(stdout(&run).contains("1 tickets"), "{}", stdout(&run));
    let log = fs::read_to_string(ws.join("tickets/tickets.jsonl")).unwrap();
    let id = log.split("\"id\":\"").nth(1).unwrap().split('"').next().unwrap().to_string();

    let ack = enav(ws, &["ack", &id]);
    assert_eq!(code(&ack), 0, "{}", stderr(&ack));
    assert!(fs::read_to_string(ws.join("tickets/outbox.jsonl")).unwrap().contains("ACKNOWLEDGED"));
    assert_eq!(code(&enav(ws, &["ack", "0000"])), 1);

    let rdir = ws.join("reports/weekly");
    fs::create_dir_all(&rdir).unwrap();
    fs::write(
        rdir.join("template.json"),
        r#"{"id": "weekly", "sections": [{"id": "strip", "kind": "plot", "plot": "conformance", "series": ["hc1"]}]}"#,
    )
    .unwrap();
    let c = enav(ws, &["comment", "weekly", "strip", "--text", "checked", "--author", "fm"]);
    assert_eq!(code(&c), 0, "{}", stderr(&c));
    assert_eq!(code(&enav(ws, &["comment", "weekly", "nope", "--text", "x"])), 1);
    let rep = enav(ws, &["report", "weekly", "--from", "2024-01-01", "--to", "2024-01-02"]);
    assert_eq!(code(&rep), 0, "{}", stderr(&rep));
    let html = fs::read_to_string(stdout(&rep).trim()).unwrap();
    assert!(html.contains("<p>checked</p>"));
    assert_eq!(code(&enav(ws, &["report", "missing", "--from", "2024-01-01", "--to", "2024-01-02"])), 2);

    let explain = enav(ws, &["run", "--from", "2024-01-01T10:00:00Z", "--to", "2024-01-01T10:15:00Z", "--explain", "hc1"]);
    assert_eq!(code(&explain), 0, "{}", stderr(&explain));
    assert!(stdout(&explain).contains("2024-01-01T10:00:00Z,FALSE,2,50,48"), "{}", stdout(&explain));
}

#[test]
fn run_with_unknown_sensor_exits_one_but_evaluates_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    workspace(ws);
    fs::write(ws.join("spec/more.afs"), "apply heating_circuit as hc2 with (vl = AHU9_supply, rl = AHU1_return);\n").unwrap();
    let run = enav(ws, &["run", "--from", "2024-01-01", "--to", "2024-01-02"]);
    assert_eq!(code(&run), 1);
    assert!(stderr(&run).contains("AHU9_supply"), "{}", stderr(&run));
    assert!(ws.join("virtual/data/rule:hc1").exists());
}

#[test]
fn bad_config_and_bad_range() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.json"), r#"{"colour": "red"}"#).unwrap();
    let o = enav(dir.path(), &["check"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("colour"));

    let dir = tempfile::tempdir().unwrap();
    let o = enav(dir.path(), &["run", "--from", "yesterday", "--to", "2024-01-02"]);
    assert_eq!(code(&o), 1);
    let o = enav(dir.path(), &["--config", "nope.json", "check"]);
    assert_eq!(code(&o), 2);
}
