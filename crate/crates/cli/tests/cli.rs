use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use ebp_core::simnet::{Cluster, ClusterOptions};
use ebp_core::{ExNode, Hardness, Session};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ebp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebp"))
        .args(args)
        .env_remove("EBP_DEFAULT_DEPOTS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn random_file(path: &Path, n: usize) -> Vec<u8> {
    let mut v = vec![0; n];
    ChaCha8Rng::seed_from_u64(n as u64).fill_bytes(&mut v);
    std::fs::write(path, &v).unwrap();
    v
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn put_then_get_is_byte_identical() {
    let c = Cluster::spawn(3, ClusterOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.bin");
    let xnd = dir.path().join("in.xnd.json");
    let output = dir.path().join("out.bin");
    let bytes = random_file(&input, 10 << 20);
    let depots = c.addrs().join(",");

    let put = ebp(&[
        "put", p(&input), "--depots", &depots, "--k", "2", "--chunk", "1MiB", "-o", p(&xnd),
    ]);
    assert!(put.status.success(), "{}", stderr(&put));
    let x = ExNode::load(&xnd).unwrap();
    assert_eq!(x.extents.len(), 10);
    assert!(x.extents.iter().all(|e| e.replicas.len() == 2));

    let get = ebp(&["get", p(&xnd), "-o", p(&output), "--parallel", "4"]);
    assert!(get.status.success(), "{}", stderr(&get));
    assert!(std::fs::read(&output).unwrap() == bytes);
}

#[test]
fn depots_fall_back_to_environment() {
    let c = Cluster::spawn(2, ClusterOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("a.bin");
    let xnd = dir.path().join("a.xnd.json");
    random_file(&input, 1000);
    let out = Command::new(env!("CARGO_BIN_EXE_ebp"))
        .args(["--json", "put", p(&input), "--k", "2", "-o", p(&xnd)])
        .env("EBP_DEFAULT_DEPOTS", c.addrs().join(","))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["length"], 1000);
    assert_eq!(v["replicas"], 2);
}

#[test]
fn get_with_all_depots_down() {
    let mut c = Cluster::spawn(2, ClusterOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.bin");
    let xnd = dir.path().join("in.xnd.json");
    random_file(&input, 5000);
    let put = ebp(&["put", p(&input), "--depots", &c.addrs().join(","), "-o", p(&xnd)]);
    assert!(put.status.success(), "{}", stderr(&put));
    c.kill(0).unwrap();
    c.kill(1).unwrap();
    let get = ebp(&["get", p(&xnd), "-o", p(&dir.path().join("out.bin"))]);
    assert_eq!(get.status.code(), Some(1));
    assert!(stderr(&get).contains("ExtentUnavailable"), "{}", stderr(&get));
}

#[test]
fn stat_on_a_capability() {
    let c = Cluster::spawn(1, ClusterOptions::default()).unwrap();
    let mut s = Session::connect(&c.addr(0).unwrap(), 5_000).unwrap();
    let caps = s.allocate(100, 600, Hardness::Soft).unwrap();
    s.store(&caps.write, 0, b"hello").unwrap();

    let out = ebp(&["stat", &caps.manage.to_string()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    for needle in ["capacity 100", "used 5", "expires_in", "hardness soft"] {
        assert!(text.contains(needle), "{text}");
    }

    let out = ebp(&["--json", "stat", &caps.manage.to_string()]);
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["capacity"], 100);
    assert_eq!(v["hardness"], "soft");

    let out = ebp(&["stat", &caps.read.to_string()]);
    assert_eq!(out.status.code(), Some(2));

    let mut forged = caps.manage.clone();
    forged.key = forged.key.with_bit_flipped(3);
    let out = ebp(&["stat", &forged.to_string()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("BadCapability"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.bin");
    random_file(&input, 10);
    let out = p(&dir.path().join("x.xnd.json")).to_string();
    assert_eq!(ebp(&["put", p(&input), "-o", &out]).status.code(), Some(2));
    assert_eq!(
        ebp(&["put", p(&input), "--depots", "a:1", "--chunk", "4MB", "-o", &out]).status.code(),
        Some(2)
    );
    assert_eq!(ebp(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ebp(&["stat", "no/such/file"]).status.code(), Some(2));
}

#[test]
fn transform_and_renew() {
    let c = Cluster::spawn(1, ClusterOptions::default()).unwrap();
    let addr = c.addr(0).unwrap();
    let mut s = Session::connect(&addr, 5_000).unwrap();
    let out_caps = s.allocate(8, 600, Hardness::Hard).unwrap();
    let ok = ebp(&[
        "transform", &addr, "fill", "--out", &out_caps.write.to_string(),
        "--budget", "wall=1000,scratch=1KiB,io=1KiB", "--param", "value=7",
    ]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("status Ok"));
    assert_eq!(s.load(&out_caps.read, 0, 8).unwrap().data, vec![7; 8]);

    let over = ebp(&[
        "transform", &addr, "fill", "--out", &out_caps.write.to_string(),
        "--budget", "wall=1000,scratch=1KiB,io=4", "--param", "value=1",
    ]);
    assert_eq!(over.status.code(), Some(1));
    assert!(stderr(&over).contains("BudgetExceeded"));
    assert!(s.probe(&out_caps.manage).unwrap().unknown_state);

    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.bin");
    let xnd = dir.path().join("in.xnd.json");
    random_file(&input, 300);
    let put = ebp(&["put", p(&input), "--depots", &addr, "--chunk", "100", "--lease", "60", "-o", p(&xnd)]);
    assert!(put.status.success(), "{}", stderr(&put));
    let renew = ebp(&["renew", p(&xnd), "--extend", "3600"]);
    assert!(renew.status.success(), "{}", stderr(&renew));
    assert!(stdout(&renew).contains("renewed 3 replica(s)"));
    let x = ExNode::load(&xnd).unwrap();
    let m = x.extents[0].replicas[0].manage.clone().unwrap();
    assert!(s.probe(&m).unwrap().expires_in_ms > 3_000_000);
}

#[test]
fn lodn_run_once_repairs() {
    let mut c = Cluster::spawn(3, ClusterOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("f.bin");
    let xnd = dir.path().join("f.xnd.json");
    let bytes = random_file(&input, 3000);
    let depots = c.addrs().join(",");
    let put = ebp(&["put", p(&input), "--depots", &depots, "--k", "2", "--chunk", "1000", "-o", p(&xnd)]);
    assert!(put.status.success(), "{}", stderr(&put));
    let policy = serde_json::json!({
        "replicas": 2,
        "renew_before": 60,
        "check_period": 10,
        "preferred_depots": c.addrs(),
    });
    std::fs::write(dir.path().join("f.policy.json"), policy.to_string()).unwrap();
    c.kill(2).unwrap();

    let run = ebp(&["lodn", "run", "--dir", p(dir.path()), "--once"]);
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(stdout(&run).contains("1 managed"), "{}", stdout(&run));
    let dead = c.addr(2).unwrap();
    let x = ExNode::load(&xnd).unwrap();
    assert!(x
        .extents
        .iter()
        .all(|e| e.replicas.len() == 2 && e.replicas.iter().all(|r| r.depot != dead)));
    let out = dir.path().join("back.bin");
    let get = ebp(&["get", p(&xnd), "-o", p(&out)]);
    assert!(get.status.success(), "{}", stderr(&get));
    assert_eq!(std::fs::read(&out).unwrap(), bytes);
}

#[test]
fn depot_serves_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("depot.json");
    std::fs::write(
        &config,
        r#"{"listen_addr": "127.0.0.1:0", "total_capacity": 1000, "max_alloc_size": 100}"#,
    )
    .unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_ebp-depot"))
        .args(["serve"])
        .env("EBP_DEPOT_CONFIG", &config)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let mut s = Session::connect(&addr, 5_000).unwrap();
    let err = s.allocate(101, 60, Hardness::Hard).unwrap_err();
    assert_eq!(err.name(), "SizeLimitExceeded");
    assert!(s.allocate(100, 60, Hardness::Hard).is_ok());
    child.kill().unwrap();
    child.wait().unwrap();

    std::fs::write(&config, r#"{"bogus": 1}"#).unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_ebp-depot"))
        .args(["serve", "--config", p(&config)])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bogus"));
}
