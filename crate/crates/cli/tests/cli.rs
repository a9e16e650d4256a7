use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::{Arc, Mutex};

use homesim_core::corpus::{read_scenes, read_tasks};
use homesim_core::planner::derive_key_actions;
use homesim_core::trajectory::load_trajectories;
use serde_json::Value;
use tempfile::TempDir;

const KEY: &str = "sk-test-do-not-print-3141";

fn homesim() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_homesim"));
    for k in ["HOMESIM_API_BASE", "HOMESIM_API_KEY", "HOMESIM_MODEL", "RUST_LOG"] {
        c.env_remove(k);
    }
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    homesim().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

/// The last progress event on stderr.
fn done(out: &Output) -> Value {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().rev().find(|l| l.starts_with('{')).expect("progress line");
    serde_json::from_str(line).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const DATA: [&str; 4] = ["--tasks", "tasks.jsonl", "--scenes", "scenes"];

fn with_data<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(DATA);
    v
}

fn setup(mix: &str) -> TempDir {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["--seed", "11", "gen-scenes", "--out", "scenes", "--count", "3"]);
    ok(d.path(), &["--seed", "11", "gen-tasks", "--scenes", "scenes", "--mix", mix, "--out", "tasks.jsonl"]);
    d
}

fn line_count(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = setup("enc2enc=2,exposed_search=1,sequential=1");
    let b = setup("enc2enc=2,exposed_search=1,sequential=1");
    let ta = std::fs::read(a.path().join("tasks.jsonl")).unwrap();
    assert_eq!(ta, std::fs::read(b.path().join("tasks.jsonl")).unwrap());
    assert!(!ta.is_empty());

    ok(a.path(), &["--seed", "12", "gen-tasks", "--scenes", "scenes", "--mix", "enc2enc=2", "--out", "other.jsonl"]);
    ok(a.path(), &["--seed", "11", "gen-tasks", "--scenes", "scenes", "--mix", "enc2enc=2", "--out", "same.jsonl"]);
    ok(a.path(), &["--seed", "11", "gen-tasks", "--scenes", "scenes", "--mix", "enc2enc=2", "--out", "same2.jsonl"]);
    let same = std::fs::read(a.path().join("same.jsonl")).unwrap();
    assert_eq!(same, std::fs::read(a.path().join("same2.jsonl")).unwrap());
    assert_ne!(same, std::fs::read(a.path().join("other.jsonl")).unwrap());
}

#[test]
fn forged_trajectories_pass_the_filter() {
    let d = setup("exposed_search=1,enclosed_grasp=1,exp2enc=1,sequential=1,long_term=1");
    let p = d.path();
    let n = line_count(&p.join("tasks.jsonl"));
    let f = ok(p, &with_data(&["forge", "--n-detours", "3", "--corrections", "--anomalies", "1", "--out", "t.jsonl"]));
    assert_eq!(done(&f)["trajectories"], n);
    let r = ok(p, &with_data(&["filter", "--trajectories", "t.jsonl", "--out", "ok.jsonl", "--rejected", "rej.jsonl"]));
    assert_eq!(done(&r)["accepted"], n, "{}", std::fs::read_to_string(p.join("rej.jsonl")).unwrap());
    assert_eq!(line_count(&p.join("ok.jsonl")), n);

    let stats: Value = serde_json::from_slice(&ok(p, &with_data(&["stats", "--trajectories", "ok.jsonl"])).stdout).unwrap();
    assert_eq!(stats["counts"]["trajectories"], n);

    let shown = String::from_utf8(ok(p, &with_data(&["replay", "--trajectories", "ok.jsonl"])).stdout).unwrap();
    assert!(shown.contains("> navigate to"), "{shown}");
    assert!(shown.trim_end().ends_with("result: success"), "{shown}");

    ok(p, &with_data(&["export", "--trajectories", "ok.jsonl", "--out", "dialogues.jsonl"]));
    assert_eq!(line_count(&p.join("dialogues.jsonl")), n);
}

#[test]
fn plans_grow_by_the_requested_detours() {
    let d = setup("exposed_search=1,exp2exp=1");
    let p = d.path();
    let none = ok(p, &with_data(&["plan", "--n-detours", "0"])).stdout;
    let two = ok(p, &with_data(&["plan", "--n-detours", "2"])).stdout;
    for (a, b) in String::from_utf8(none).unwrap().lines().zip(String::from_utf8(two).unwrap().lines()) {
        let (a, b): (Value, Value) = (serde_json::from_str(a).unwrap(), serde_json::from_str(b).unwrap());
        let len = |v: &Value| v["full"].as_array().unwrap().len();
        assert!(len(&b) > len(&a), "{a}\n{b}");
    }
}

#[test]
fn oracle_evaluation_is_perfect() {
    let d = setup("exposed_search=1,enc2exp=1,exposed_toggle=1");
    let p = d.path();
    let n = line_count(&p.join("tasks.jsonl"));
    ok(p, &with_data(&["evaluate", "--agent", "oracle", "--seeds", "2", "--report", "r.json", "--table", "r.csv", "--trajectories", "ev.jsonl"]));
    let r = read_json(&p.join("r.json"));
    assert_eq!(r["overall"]["episodes"], 2 * n);
    assert_eq!(r["overall"]["success_rate"], 1.0);
    assert_eq!(r["overall"]["search_efficiency"], 1.0);

    let mut table = csv::Reader::from_path(p.join("r.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = table.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * n);
    let col = table.headers().unwrap().iter().position(|h| h == "search_efficiency").unwrap();
    assert!(rows.iter().all(|r| r[col].split('/').count() == 2), "{rows:?}");
    assert_eq!(load_trajectories(&p.join("ev.jsonl")).unwrap().len(), 2 * n);
}

#[test]
fn usage_errors_exit_with_2() {
    let d = setup("exposed_search=1");
    let p = d.path();
    assert_eq!(run(p, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(p, &["gen-tasks", "--scenes", "scenes", "--mix", "nope=3"]).status.code(), Some(2));
    assert_eq!(run(p, &with_data(&["evaluate", "--agent", "psychic", "--report", "r.json"])).status.code(), Some(2));
    assert_eq!(run(p, &["corpus", "--stage", "9", "--out", "c"]).status.code(), Some(2));
    // an external agent without an endpoint is a usage problem too
    assert_eq!(run(p, &with_data(&["evaluate", "--agent", "external", "--report", "r.json"])).status.code(), Some(2));
}

#[test]
fn bad_data_names_file_and_line() {
    let d = setup("exposed_search=2");
    let p = d.path();
    let good = std::fs::read_to_string(p.join("tasks.jsonl")).unwrap();
    let first = good.lines().next().unwrap();
    std::fs::write(p.join("tasks.jsonl"), format!("{first}\n{{\"id\": 7}}\n")).unwrap();
    let out = run(p, &with_data(&["plan"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tasks.jsonl:2"), "{}", String::from_utf8_lossy(&out.stderr));

    let orphan = first.replacen("\"scene_id\":\"", "\"scene_id\":\"gone-", 1);
    std::fs::write(p.join("tasks.jsonl"), format!("{first}\n\n{orphan}\n")).unwrap();
    let out = run(p, &with_data(&["plan"]));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("tasks.jsonl:3") && err.contains("gone-"), "{err}");

    std::fs::write(p.join("tasks.jsonl"), &good).unwrap();
    std::fs::write(p.join("t.jsonl"), "{}\n").unwrap();
    let out = run(p, &with_data(&["filter", "--trajectories", "t.jsonl", "--out", "o.jsonl"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("t.jsonl:1"));
}

#[test]
fn corpus_generates_and_verifies() {
    let d = TempDir::new().unwrap();
    let p = d.path();
    ok(p, &["--seed", "5", "corpus", "--stage", "2", "--count", "12", "--out", "s2"]);
    ok(p, &["corpus", "--stage", "2", "--out", "s2", "--verify"]);
    ok(p, &["--seed", "5", "corpus", "--stage", "2", "--count", "12", "--out", "again"]);
    for f in ["manifest.json", "tasks.jsonl", "trajectories.jsonl"] {
        assert_eq!(std::fs::read(p.join("s2").join(f)).unwrap(), std::fs::read(p.join("again").join(f)).unwrap(), "{f}");
    }
    // wrong stage for the manifest
    assert_eq!(run(p, &["corpus", "--stage", "3", "--out", "s2", "--verify"]).status.code(), Some(1));
    // drop a trajectory: counts no longer match
    let tp = p.join("s2/trajectories.jsonl");
    let text = std::fs::read_to_string(&tp).unwrap();
    std::fs::write(&tp, text.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    assert_eq!(run(p, &["corpus", "--stage", "2", "--out", "s2", "--verify"]).status.code(), Some(1));
}

/// Oracle decisions for every task in `dir`, keyed by task id.
fn oracle_actions(dir: &Path) -> Vec<(String, Vec<String>)> {
    let scenes = read_scenes(&dir.join("scenes")).unwrap();
    read_tasks(&dir.join("tasks.jsonl"))
        .unwrap()
        .iter()
        .map(|t| {
            let scene = &scenes[&t.scene_id];
            let mut acts: Vec<String> = derive_key_actions(t, scene).unwrap().actions.iter().map(|a| a.render(scene)).collect();
            if acts.last().map(String::as_str) != Some("end") {
                acts.push("end".into());
            }
            (t.id.clone(), acts)
        })
        .collect()
}

fn decision(a: &str) -> String {
    format!("I will act now.\n<DecisionMaking>{a}</DecisionMaking>")
}

#[test]
fn stdio_server_runs_a_session() {
    let d = setup("enc2exp=1");
    let p = d.path();
    let tasks = oracle_actions(p);
    let (task_id, acts) = &tasks[0];
    let mut child = homesim()
        .current_dir(p)
        .args(with_data(&["serve", "--stdio", "--report", "report.json"]))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let mut send = |v: Value| writeln!(stdin, "{v}").unwrap();
    send(serde_json::json!({"type": "session_init", "version": 1, "task_id": task_id, "seed": 3}));
    let mut next = acts.iter();
    let summary = loop {
        let m: Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
        match m["type"].as_str().unwrap() {
            "session_ready" => assert_eq!(m["task_id"], task_id.as_str()),
            "turn" if m["role"] == "user" => send(serde_json::json!({"type": "decision", "text": decision(next.next().unwrap())})),
            "feedback" => panic!("oracle got feedback: {m}"),
            "episode_end" => break m["result"].clone(),
            _ => {}
        }
    };
    assert_eq!(summary["success"], true, "{summary}");
    send(serde_json::json!({"type": "decision", "text": "out of turn"}));
    let e: Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
    assert_eq!(e["type"], "error");
    send(serde_json::json!({"type": "report_request"}));
    let r: Value = serde_json::from_str(&lines.next().unwrap().unwrap()).unwrap();
    assert_eq!(r["report"]["overall"]["episodes"], 1);
    drop(stdin);
    assert!(child.wait().unwrap().success());
    assert_eq!(read_json(&p.join("report.json"))["overall"]["success_rate"], 1.0);
}

struct Seen {
    auth: Option<String>,
    body: Value,
}

type Responder = Box<dyn FnMut(&Value) -> (u16, String) + Send>;

/// Minimal chat-completion endpoint: one request per connection.
fn mock(mut respond: Responder) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut r = BufReader::new(stream.try_clone().unwrap());
            let (mut len, mut auth) = (0, None);
            loop {
                let mut h = String::new();
                r.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap_or((h, ""));
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            r.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap();
            let (status, text) = respond(&body);
            log.lock().unwrap().push(Seen { auth, body });
            let resp = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn fast_config(dir: &Path) -> PathBuf {
    let p = dir.join("fast.toml");
    std::fs::write(&p, "[external]\nattempts = 3\nbackoff_ms = 1\ntimeout_secs = 5\n").unwrap();
    p
}

fn external(dir: &Path, url: &str, extra: &[&str]) -> Output {
    let cfg = fast_config(dir);
    let mut args = vec!["--config", cfg.to_str().unwrap(), "-v"];
    args.extend(with_data(&["evaluate", "--agent", "external", "--report", "r.json"]));
    args.extend(extra);
    homesim().current_dir(dir).env("HOMESIM_API_BASE", url).env("HOMESIM_API_KEY", KEY).args(args).output().unwrap()
}

fn assert_no_key(dir: &Path, out: &Output) {
    assert!(!String::from_utf8_lossy(&out.stdout).contains(KEY));
    assert!(!String::from_utf8_lossy(&out.stderr).contains(KEY));
    for e in std::fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        if e.file_type().unwrap().is_file() {
            assert!(!std::fs::read_to_string(e.path()).unwrap_or_default().contains(KEY), "{:?}", e.path());
        }
    }
}

#[test]
fn external_agent_follows_the_endpoint_and_replays() {
    let d = setup("exposed_search=1,exp2exp=1");
    let p = d.path();
    let plans = oracle_actions(p);
    let n = plans.len();
    // each request carries the whole dialogue; the task text picks the plan
    let (url, seen) = mock(Box::new(move |body| {
        let msgs = body["messages"].as_array().unwrap();
        let all: String = msgs.iter().map(|m| m["content"].as_str().unwrap()).collect::<Vec<_>>().join("\n");
        let asked = msgs.iter().filter(|m| m["role"] == "assistant").count();
        let (_, acts) = plans.iter().find(|(id, _)| all.contains(id.as_str())).unwrap_or(&plans[0]);
        (200, completion(&decision(&acts[asked.min(acts.len() - 1)])))
    }));
    let out = external(p, &url, &["--transcripts", "tr.jsonl", "--trajectories", "ext.jsonl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(&p.join("r.json"));
    assert_eq!(r["overall"]["episodes"], n);
    assert_eq!(r["excluded_infra_failures"], 0);
    {
        let seen = seen.lock().unwrap();
        assert!(!seen.is_empty());
        assert!(seen.iter().all(|s| s.auth.as_deref() == Some(&format!("Bearer {KEY}")[..])));
        assert!(seen.iter().all(|s| s.body["temperature"] == 0 && s.body["messages"][0]["role"] == "system"));
    }
    assert_no_key(p, &out);

    let replay = format!("replay:{}", p.join("tr.jsonl").display());
    ok(p, &with_data(&["evaluate", "--agent", &replay, "--report", "r2.json", "--trajectories", "rep.jsonl"]));
    assert_eq!(std::fs::read(p.join("ext.jsonl")).unwrap(), std::fs::read(p.join("rep.jsonl")).unwrap());
    assert_eq!(read_json(&p.join("r2.json")), r);
}

#[test]
fn the_task_text_reaches_the_endpoint() {
    // guards the lookup in the test above: the instruction or id must appear in the prompt
    let d = setup("exposed_search=1");
    let p = d.path();
    let tasks = read_tasks(&p.join("tasks.jsonl")).unwrap();
    let (url, seen) = mock(Box::new(|_| (200, completion(&decision("end")))));
    assert!(external(p, &url, &[]).status.success());
    let seen = seen.lock().unwrap();
    let prompt = seen[0].body["messages"].to_string();
    assert!(tasks.iter().any(|t| prompt.contains(&t.text.replace('"', "\\\""))), "{prompt}");
}

#[test]
fn persistent_server_errors_become_infra_failures() {
    let d = setup("exposed_search=1");
    let p = d.path();
    let n = line_count(&p.join("tasks.jsonl"));
    let (url, seen) = mock(Box::new(|_| (500, "{\"error\":\"down\"}".into())));
    let out = external(p, &url, &["--transcripts", "tr.jsonl", "--table", "t.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(&p.join("r.json"));
    assert_eq!(r["excluded_infra_failures"], n);
    assert_eq!(r["overall"]["episodes"], 0);
    assert_eq!(seen.lock().unwrap().len(), 3 * n);
    let tr = std::fs::read_to_string(p.join("tr.jsonl")).unwrap();
    assert!(tr.lines().all(|l| l.contains("\"attempts\":3") && l.contains("HTTP 500")), "{tr}");
    assert_no_key(p, &out);

    let replay = format!("replay:{}", p.join("tr.jsonl").display());
    ok(p, &with_data(&["evaluate", "--agent", &replay, "--report", "r2.json"]));
    assert_eq!(read_json(&p.join("r2.json")), r);
}

#[test]
fn rejected_credentials_stop_the_run() {
    let d = setup("exposed_search=1");
    let p = d.path();
    let (url, seen) = mock(Box::new(|_| (401, "{}".into())));
    let out = external(p, &url, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(seen.lock().unwrap().len(), 1, "auth failures are not retried");
    assert!(String::from_utf8_lossy(&out.stderr).contains("401"));
    assert_no_key(p, &out);
}
