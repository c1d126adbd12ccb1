use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mcmon"))
}

fn path(rel: &str) -> String {
    format!("{}/{rel}", env!("CARGO_MANIFEST_DIR"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mcmon-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_exit_codes() {
    let ok = run(&["validate", "--manifest", &path("fixtures/two_partition.json")]);
    assert_eq!(ok.status.code(), Some(0));
    for (fixture, kind) in [
        ("bad_overlap.json", "writable-overlap"),
        ("bad_device_shared.json", "device-exclusivity"),
        ("bad_monitor_overlap.json", "monitor-integrity"),
    ] {
        let o = run(&["validate", "--manifest", &path(&format!("fixtures/{fixture}"))]);
        assert_eq!(o.status.code(), Some(1), "{fixture}");
        assert!(stdout(&o).contains(kind), "{fixture}: {}", stdout(&o));
    }
    let bad = scratch("broken.json");
    std::fs::write(&bad, "{ \"platform\": ").unwrap();
    let o = run(&["validate", "--manifest", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["validate", "--manifest", "/nonexistent/manifest.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pmp_dump_prints_sixteen_entries() {
    let m = path("fixtures/two_partition.json");
    let o = run(&["pmp-dump", "--manifest", &m, "--partition", "freertos"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 16);
    assert!(text.lines().next().unwrap().starts_with("0 A=NAPOT L=0 RWX=111"));
    let o = run(&["pmp-dump", "--manifest", &m, "--partition", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_writes_csv_and_histogram_deterministically() {
    let m = path("fixtures/two_partition.json");
    let mut csvs = Vec::new();
    for i in 0..2 {
        let out = scratch(&format!("samples{i}.csv"));
        let hist = scratch(&format!("hist{i}.csv"));
        let o = run(&[
            "run",
            "--manifest",
            &m,
            "--profile",
            "fu540-like",
            "--iters",
            "20",
            "--seed",
            "5",
            "--jitter",
            "2",
            "--out",
            out.to_str().unwrap(),
            "--hist",
            hist.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(&out).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4 * 20);
        assert!(
            std::fs::read_to_string(&hist)
                .unwrap()
                .starts_with("phase,bin_lo_us,bin_hi_us,count\n")
        );
        csvs.push(csv);
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn run_calibrated_to_stdout() {
    let m = path("fixtures/two_partition.json");
    let o = run(&["run", "--manifest", &m, "--iters", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("latency_1to4,0,460,0.46\n"), "{text}");
    assert!(text.contains("restore_context_at9,2,48,0.048\n"));
}

#[test]
fn run_errors() {
    let m = path("fixtures/two_partition.json");
    let o = run(&["run", "--manifest", &m, "--clock-mhz", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["run", "--manifest", &m, "--profile", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["run", "--manifest", &path("fixtures/bad_overlap.json")]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["run", "--manifest", &m, "--jitter", "lots"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn demo_shows_the_scenario() {
    let o = run(&["demo", "--manifest", &path("fixtures/two_partition.json")]);
    assert_eq!(o.status.code(), Some(0));
    let log = stdout(&o);
    for needle in
        ["event=BOOT", "event=TIMER", "event=ECALL", "event=FAULT", "event=REBOOT", "STEP-MARK(9)"]
    {
        assert!(log.contains(needle), "missing {needle}");
    }
}

#[test]
fn demo_loads_guest_scripts() {
    let o = run(&[
        "demo",
        "--manifest",
        &path("fixtures/two_partition.json"),
        "--guest",
        &path("guests/rtos_task.s"),
        "--guest",
        &path("guests/fault_monitor.s"),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = stdout(&o);
    assert_eq!(log.matches("event=TIMER").count(), 2);
    assert!(log.contains("tval=0x80000100"));
}
