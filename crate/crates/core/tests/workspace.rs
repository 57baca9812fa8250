use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use enav::ingest::format_timestamp;
use enav::tickets::TicketState;
use enav::workspace::{Workspace, WorkspaceConfig, WorkspaceError};

const T0: i64 = 1_704_067_200; // 2024-01-01T00:00:00Z
const DAY: i64 = 86_400;

const SPEC: &str = r#"sensor AHU1_supply : "°C" @ 15min;
sensor AHU1_return : "°C" @ 15min;
rule heating_circuit(vl, rl) = vl - rl >= 5;
function spread(vl, rl) = vl - rl;
apply heating_circuit as hc1 with (vl = AHU1_supply, rl = AHU1_return);
apply spread as sp1 with (vl = AHU1_supply, rl = AHU1_return);
metric daily_spread = AVERAGE(sp1) per day;
metric supply_max = MAXIMUM(AHU1_supply) per week;
"#;

/// Two days of supply/return readings; slots 40..52 on day one are a
/// three-hour malfunction where the spread collapses to 2 K.
fn heating_csv(days: i64) -> String {
    let mut out = String::from("timestamp,point,value\n");
    for i in 0..days * 96 {
        let t = format_timestamp(T0 + i * 900);
        let bad = (40..52).contains(&i);
        let supply = if bad { 50.0 } else { 60.0 + (i % 96) as f64 / 8.0 };
        let ret = if bad { 48.0 } else { 45.0 };
        out.push_str(&format!("{t},AHU1_supply,{supply}\n{t},AHU1_return,{ret}\n"));
    }
    out
}

fn heating(dir: &Path, days: i64) -> Workspace {
    fs::create_dir_all(dir.join("spec")).unwrap();
    fs::write(dir.join("spec/heating.afs"), SPEC).unwrap();
    fs::write(dir.join("data.csv"), heating_csv(days)).unwrap();
    let ws = Workspace::open(dir, None).unwrap();
    ws.import(&dir.join("data.csv"), None, false).unwrap();
    ws
}

/// Every file under `dir` except logs, by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                if p.file_name().unwrap() != "logs" {
                    stack.push(p);
                }
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/heating").join(name);
    if std::env::var_os("ENAV_UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).unwrap();
    }
    assert_eq!(actual, fs::read_to_string(&path).unwrap(), "golden file {name}");
}

#[test]
fn empty_workspace_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path(), None).unwrap();
    let out = ws.run(T0, T0 + DAY, None).unwrap();
    assert_eq!(out.failed, 0);
    assert!(out.evaluated.is_empty());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn heating_fixture_matches_golden_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ws = heating(dir.path(), 2);
    let out = ws.run(T0, T0 + 2 * DAY, None).unwrap();
    assert_eq!(out.failed, 0, "{:?}", out.diagnostics);
    assert_eq!(out.evaluated, vec!["rule:hc1", "fn:sp1"]);

    // the only FALSE interval is the injected one
    assert_eq!(out.tickets.len(), 1);
    let t = &out.tickets[0];
    assert_eq!((t.start, t.end, t.step_count), (T0 + 40 * 900, T0 + 51 * 900, 12));
    assert_eq!(t.state, TicketState::Closed);

    // oracle for day one: 84 normal slots plus 12 at spread 2
    let normal: f64 = (0..96).filter(|i| !(40..52).contains(i)).map(|i| 15.0 + (i % 96) as f64 / 8.0).sum();
    let want = (normal + 12.0 * 2.0) / 96.0;
    let metric = fs::read_to_string(dir.path().join("metrics/daily_spread.csv")).unwrap();
    let day1: f64 = metric.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!((day1 - want).abs() < 1e-9);

    golden("tickets.jsonl", &fs::read_to_string(dir.path().join("tickets/tickets.jsonl")).unwrap());
    golden("outbox.jsonl", &fs::read_to_string(dir.path().join("tickets/outbox.jsonl")).unwrap());
    golden("daily_spread.csv", &metric);
    golden("supply_max.csv", &fs::read_to_string(dir.path().join("metrics/supply_max.csv")).unwrap());
    golden("hc1_summary.csv", &fs::read_to_string(dir.path().join("summaries/hc1.csv")).unwrap());
    golden("rule_hc1.csv", &ws.export("rule:hc1", T0, T0 + 2 * DAY, false).unwrap());
    golden("fn_sp1.csv", &ws.export("fn:sp1", T0, T0 + 2 * DAY, false).unwrap());
}

#[test]
fn identical_workspaces_produce_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    heating(a.path(), 2).run(T0, T0 + 2 * DAY, None).unwrap();
    heating(b.path(), 2).run(T0, T0 + 2 * DAY, None).unwrap();
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
}

#[test]
fn rerun_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let ws = heating(dir.path(), 2);
    ws.run(T0, T0 + 2 * DAY, None).unwrap();
    let before = snapshot(dir.path());
    ws.run(T0, T0 + 2 * DAY, None).unwrap();
    assert_eq!(before, snapshot(dir.path()));
}

#[test]
fn incremental_runs_extend_an_open_ticket() {
    let dir = tempfile::tempdir().unwrap();
    let ws = heating(dir.path(), 2);
    // cut in the middle of the malfunction
    let cut = T0 + 46 * 900;
    let first = ws.run(T0, cut, None).unwrap();
    assert_eq!(first.tickets.len(), 1);
    assert_eq!(first.tickets[0].state, TicketState::Open);
    let second = ws.run(cut, T0 + DAY, None).unwrap();
    assert_eq!(second.tickets.len(), 1);
    let t = &second.tickets[0];
    assert_eq!(t.id, first.tickets[0].id);
    assert_eq!((t.start, t.end), (T0 + 40 * 900, T0 + 51 * 900));
    assert_eq!(t.state, TicketState::Closed);
}

#[test]
fn unknown_sensor_fails_only_its_rule() {
    let dir = tempfile::tempdir().unwrap();
    let ws = heating(dir.path(), 1);
    fs::write(
        dir.path().join("spec/extra.afs"),
        "apply heating_circuit as hc2 with (vl = AHU2_supply, rl = AHU1_return);\n",
    )
    .unwrap();
    let out = ws.run(T0, T0 + DAY, None).unwrap();
    assert_eq!(out.failed, 1, "{:?}", out.diagnostics);
    assert!(out.diagnostics[0].contains("AHU2_supply"), "{:?}", out.diagnostics);
    assert_eq!(out.evaluated, vec!["rule:hc1", "fn:sp1"]);
}

#[test]
fn spec_change_resets_virtual_sensors() {
    let dir = tempfile::tempdir().unwrap();
    let ws = heating(dir.path(), 1);
    ws.run(T0, T0 + DAY, None).unwrap();
    assert!(dir.path().join("virtual/data/fn:sp1").exists());
    let edited = SPEC.replace("apply spread as sp1 with (vl = AHU1_supply, rl = AHU1_return);\n", "")
        .replace("metric daily_spread = AVERAGE(sp1) per day;\n", "");
    fs::write(dir.path().join("spec/heating.afs"), edited).unwrap();
    ws.run(T0, T0 + 3600, None).unwrap();
    assert!(!dir.path().join("virtual/data/fn:sp1").exists());
    assert!(dir.path().join("virtual/data/rule:hc1").exists());
}

#[test]
fn explain_lists_subexpressions() {
    let dir = tempfile::tempdir().unwrap();
    let ws = heating(dir.path(), 1);
    let out = ws.run(T0, T0 + 3600, Some("hc1")).unwrap();
    let csv = out.explain.unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "timestamp,AHU1_supply - AHU1_return >= 5,AHU1_supply - AHU1_return,AHU1_supply,AHU1_return");
    assert_eq!(lines.next().unwrap(), "2024-01-01T00:00:00Z,TRUE,15,60,45");
    let out = ws.run(T0, T0 + 3600, Some("nothing")).unwrap();
    assert_eq!(out.failed, 1);
}

#[test]
fn config_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.json"), r#"{"timezone": "Europe/Berlin", "perod": 900}"#).unwrap();
    let err = Workspace::open(dir.path(), None).unwrap_err();
    assert!(matches!(err, WorkspaceError::Config { .. }));
    assert!(err.to_string().contains("perod"), "{err}");
    assert_eq!(err.exit_code(), 1);

    assert!(WorkspaceConfig::from_json(r#"{"timezone": "Mars/Olympus"}"#).is_err());
    assert!(WorkspaceConfig::from_json(r#"{"coverage_threshold": 1.5}"#).is_err());
    let c = WorkspaceConfig::from_json(r#"{"timezone": "Europe/Berlin", "preprocess": {"max_interp_gap": 2}}"#).unwrap();
    assert_eq!(c.preprocess.max_interp_gap, 2);
    assert_eq!(c.ticket_min_steps, 4);
}

#[test]
fn lock_excludes_a_second_writer() {
    let dir = tempfile::tempdir().unwrap();
    let ws = heating(dir.path(), 1);
    let held = ws.lock().unwrap();
    let err = ws.run(T0, T0 + DAY, None).unwrap_err();
    assert!(matches!(err, WorkspaceError::Locked(_)));
    assert_eq!(err.exit_code(), 2);
    drop(held);
    ws.run(T0, T0 + DAY, None).unwrap();
}

#[test]
fn report_keeps_comments_across_regeneration() {
    let dir = tempfile::tempdir().unwrap();
    let ws = heating(dir.path(), 2);
    ws.run(T0, T0 + DAY, None).unwrap();
    let rdir = dir.path().join("reports/heating");
    fs::create_dir_all(&rdir).unwrap();
    fs::write(
        rdir.join("template.json"),
        r#"{"id": "heating", "title": "Heating circuits", "sections": [
            {"id": "temps", "kind": "plot", "plot": "line", "series": ["AHU1_supply", "AHU1_return"]},
            {"id": "carpet", "kind": "plot", "plot": "carpet", "series": ["sp1"]},
            {"id": "strip", "kind": "plot", "plot": "conformance", "series": ["hc1"]},
            {"id": "spread", "kind": "metric_table", "metrics": ["daily_spread"]},
            {"id": "rules", "kind": "rule_summary", "rules": ["hc1"]}
        ]}"#,
    )
    .unwrap();
    ws.comment("heating", "rules", "fm", "Valve V2 stuck <closed> around noon.", T0 + DAY).unwrap();
    assert!(ws.comment("heating", "ghost", "fm", "x", T0).is_err());

    let first = ws.report("heating", T0, T0 + DAY).unwrap();
    ws.run(T0 + DAY, T0 + 2 * DAY, None).unwrap();
    let second = ws.report("heating", T0, T0 + 2 * DAY).unwrap();
    let comment = |p: &Path| -> Vec<String> {
        fs::read_to_string(p).unwrap().lines().filter(|l| l.starts_with("<blockquote")).map(String::from).collect()
    };
    assert_eq!(comment(&first).len(), 1);
    assert!(comment(&first)[0].contains("Valve V2 stuck &lt;closed&gt; around noon."));
    assert_eq!(comment(&first), comment(&second));
    let html = fs::read_to_string(&first).unwrap();
    assert!(html.contains("<td>hc1</td><td>96</td><td class=\"green\">87.5%</td><td class=\"red\">12.5%</td>"), "{html}");

    // rendering again is byte-stable
    let again = fs::read(ws.report("heating", T0, T0 + DAY).unwrap()).unwrap();
    assert_eq!(again, fs::read(&first).unwrap());
}
