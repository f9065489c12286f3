//! Drives the `ratedp` binary end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ratedp::data::load_spike_file;
use ratedp::experiment::expand_grid;
use ratedp::fed::{Aggregation, Selection};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn ratedp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ratedp"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn quick() -> String {
    configs().join("quick.toml").display().to_string()
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    v
}

#[test]
fn shipped_configs_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let specs = [
        configs().join("quick.toml"),
        configs().join("reference.toml"),
    ];
    let args: Vec<String> = specs.iter().map(|p| p.display().to_string()).collect();
    let mut a: Vec<&str> = vec!["validate"];
    a.extend(args.iter().map(String::as_str));
    assert_eq!(code(&ratedp(&a, tmp.path())), 0);
    let grid = configs().join("ablation.toml").display().to_string();
    let o = ratedp(&["validate", "--grid", &grid], tmp.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn mutated_configs_are_rejected_with_every_violation() {
    let tmp = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(configs().join("quick.toml")).unwrap();
    let cases: &[(&str, &str, &str)] = &[
        ("rounds = 3", "rounds = 0", "R must be"),
        ("batch_size = 16", "batch_size = 0", "B must be"),
        ("clip_c = 1.0", "clip_c = -0.5", "clip bound"),
        ("epsilon = 4.0", "epsilon = 0.0", "epsilon must be positive"),
        ("p_select = 5", "p_select = 11", "selected clients P"),
        (
            "hidden = [16, 16]",
            "hidden = [16, 0]",
            "hidden layer widths",
        ),
        (
            "samples_per_class = 30",
            "samples_per_class = 0",
            "samples_per_class",
        ),
        (
            "id = \"quick\"",
            "id = \"quick\"\nmetrics = true",
            "reference",
        ),
        ("seed = 1", "seed = 1\nunknown_field = 2", "unknown field"),
    ];
    for (from, to, expect) in cases {
        assert!(base.contains(from), "{from}");
        let path = tmp.path().join("bad.toml");
        fs::write(&path, base.replacen(from, to, 1)).unwrap();
        let o = ratedp(&["validate", path.to_str().unwrap()], tmp.path());
        assert_eq!(code(&o), 1, "{to}");
        assert!(stderr(&o).contains(expect), "{to}: {}", stderr(&o));
    }
    // Several violations are all reported.
    fs::write(
        tmp.path().join("multi.toml"),
        "[fed]\nk_clients = 0\n[dp]\nenabled = true\nclip_c = 0.0\n",
    )
    .unwrap();
    let o = ratedp(&["validate", "multi.toml"], tmp.path());
    assert_eq!(code(&o), 1);
    let e = stderr(&o);
    assert!(
        e.contains("K must be ≥ 1") && e.contains("clip bound"),
        "{e}"
    );
}

#[test]
fn grid_reference_errors_are_validation_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "[[cell]]\nid = \"a\"\ndp = { enabled = true }\n[[cell]]\nid = \"b\"\nreference = \"a\"\nmetrics = true\n";
    fs::write(tmp.path().join("g.toml"), text).unwrap();
    let o = ratedp(&["grid", "g.toml"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("must have DP disabled"));
}

#[test]
fn run_persists_and_refuses_collisions() {
    let tmp = tempfile::tempdir().unwrap();
    let q = quick();
    let first = ratedp(&["run", &q, "--out", "runs"], tmp.path());
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let dirs = run_dirs(&tmp.path().join("runs"));
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].join("manifest.json").is_file() && dirs[0].join("rounds.ndjson").is_file());
    let again = ratedp(&["run", &q, "--out", "runs"], tmp.path());
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("already exists"));
    let forced = ratedp(&["run", &q, "--out", "runs", "--force"], tmp.path());
    assert_eq!(code(&forced), 0);
    assert_eq!(stdout(&first), stdout(&forced));
    // Realized epsilon stays within the target.
    let row = stdout(&first);
    let header: Vec<&str> = row.lines().next().unwrap().split(',').collect();
    let values: Vec<&str> = row.lines().nth(1).unwrap().split(',').collect();
    let col = header
        .iter()
        .position(|h| *h == "max_realized_epsilon")
        .unwrap();
    assert!(values[col].parse::<f64>().unwrap() <= 4.0);
    // A different seed is a different config, hence a different directory.
    let seeded = ratedp(&["run", &q, "--out", "runs", "--seed", "7"], tmp.path());
    assert_eq!(code(&seeded), 0);
    assert_eq!(run_dirs(&tmp.path().join("runs")).len(), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let q = quick();
    let oa = ratedp(&["run", &q, "--out", "runs"], a.path());
    let ob = ratedp(&["run", &q, "--out", "runs"], b.path());
    assert_eq!(stdout(&oa), stdout(&ob));
    let (da, db) = (
        run_dirs(&a.path().join("runs")),
        run_dirs(&b.path().join("runs")),
    );
    for f in ["rounds.ndjson", "manifest.json"] {
        assert_eq!(
            fs::read(da[0].join(f)).unwrap(),
            fs::read(db[0].join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn paired_metrics_need_a_reference_and_recompute_from_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let q = quick();
    let paired = fs::read_to_string(configs().join("quick.toml"))
        .unwrap()
        .replacen(
            "id = \"quick\"",
            "id = \"quick_dp\"\nreference = \"quick_ref\"\nmetrics = true",
            1,
        );
    fs::write(tmp.path().join("paired.toml"), paired).unwrap();
    let missing = ratedp(&["run", "paired.toml", "--out", "runs"], tmp.path());
    assert_eq!(code(&missing), 1);
    assert!(stderr(&missing).contains("--reference"));

    let r = ratedp(&["run", &q, "--out", "refs", "--no-dp"], tmp.path());
    assert_eq!(code(&r), 0);
    let ref_dir = run_dirs(&tmp.path().join("refs")).remove(0);
    let ref_arg = ref_dir.display().to_string();
    let t = ratedp(
        &[
            "run",
            "paired.toml",
            "--out",
            "runs",
            "--reference",
            &ref_arg,
        ],
        tmp.path(),
    );
    assert_eq!(code(&t), 0, "{}", stderr(&t));
    let row = stdout(&t);
    let values: Vec<&str> = row.lines().nth(1).unwrap().split(',').collect();
    assert!(
        values[6].parse::<f64>().is_ok(),
        "rmse column filled: {row}"
    );

    let dp_dir = run_dirs(&tmp.path().join("runs"))
        .remove(0)
        .display()
        .to_string();
    let m = ratedp(&["metrics", &dp_dir, "--reference", &ref_arg], tmp.path());
    assert_eq!(code(&m), 0);
    assert_eq!(stdout(&m), row);

    // A DP-enabled run is not a valid reference.
    let bad = ratedp(
        &[
            "run",
            "paired.toml",
            "--out",
            "runs2",
            "--reference",
            &dp_dir,
        ],
        tmp.path(),
    );
    assert_eq!(code(&bad), 1);
}

#[test]
fn plot_data_has_stable_columns() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&ratedp(&["run", &quick(), "--out", "runs"], tmp.path())),
        0
    );
    assert_eq!(
        code(&ratedp(
            &["run", &quick(), "--out", "runs", "--no-dp"],
            tmp.path()
        )),
        0
    );
    let dirs: Vec<String> = run_dirs(&tmp.path().join("runs"))
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    let mut a = vec!["plot-data", "--kind", "layer-rates-by-eps"];
    a.extend(dirs.iter().map(String::as_str));
    let o = ratedp(&a, tmp.path());
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.starts_with("experiment_id,epsilon,client,layer,mean_rate,rounds\n"));
    // One DP group and one DP-free group (empty epsilon).
    assert!(text.lines().any(|l| l.starts_with("quick,4.0,")));
    assert!(text.lines().any(|l| l.starts_with("quick,,")));

    let o = ratedp(
        &["plot-data", "--kind", "client-histograms", &dirs[0]],
        tmp.path(),
    );
    let text = stdout(&o);
    assert!(text.starts_with("experiment_id,client,class,count\n"));
    let total: usize = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    // 300 samples minus the validation shards.
    assert!(total > 0 && total < 300);
    let missing = ratedp(
        &["plot-data", "--kind", "client-histograms", "nowhere"],
        tmp.path(),
    );
    assert_eq!(code(&missing), 2);
}

#[test]
fn generated_spike_files_drive_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ratedp(
        &[
            "gen-data",
            "--samples-per-class",
            "12",
            "--seed",
            "4",
            "--out",
            "d.spk",
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ds = load_spike_file(&tmp.path().join("d.spk")).unwrap();
    assert_eq!((ds.len(), ds.steps(), ds.channels()), (120, 200, 20));
    let spec = "id = \"file\"\nspike_file = \"d.spk\"\n[arch]\nhidden = [8]\n[fed]\nk_clients = 3\nrounds = 1\nbatch_size = 16\nprotocol = { agg = \"FedAvg\", sel = \"All\", n_candidates = 3, p_select = 3 }\n";
    fs::write(tmp.path().join("file.toml"), spec).unwrap();
    let r = ratedp(&["run", "file.toml", "--out", "runs"], tmp.path());
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    fs::write(tmp.path().join("junk.spk"), b"not a spike file").unwrap();
    let spec_bad = spec
        .replace("d.spk", "junk.spk")
        .replace("\"file\"", "\"junk\"");
    fs::write(tmp.path().join("junk.toml"), spec_bad).unwrap();
    let o = ratedp(&["run", "junk.toml", "--out", "runs3"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("header"), "{}", stderr(&o));
}

#[test]
fn ablation_grid_expands_to_the_expected_cells() {
    let cells = expand_grid(&fs::read_to_string(configs().join("ablation.toml")).unwrap()).unwrap();
    let find = |id: &str| cells.iter().find(|c| c.id == id).unwrap();
    // id, epsilon (None = no DP), C, aggregation, selection, N, P
    let table: &[(&str, Option<f64>, f64, Aggregation, Selection, usize, usize)] = &[
        ("A0", None, 0.0, Aggregation::FedAvg, Selection::All, 10, 10),
        (
            "A1",
            Some(8.0),
            0.5,
            Aggregation::FedAvg,
            Selection::All,
            10,
            10,
        ),
        (
            "A2",
            Some(4.0),
            0.5,
            Aggregation::FedAvg,
            Selection::All,
            10,
            10,
        ),
        (
            "A3",
            Some(1.0),
            0.5,
            Aggregation::FedAvg,
            Selection::All,
            10,
            10,
        ),
        (
            "A4",
            Some(8.0),
            0.5,
            Aggregation::RateW,
            Selection::DeltaR,
            10,
            5,
        ),
        (
            "A5",
            Some(1.0),
            1.0,
            Aggregation::RateW,
            Selection::DeltaR,
            10,
            5,
        ),
        (
            "A6",
            Some(1.0),
            2.0,
            Aggregation::RateW,
            Selection::DeltaR,
            10,
            5,
        ),
    ];
    for &(id, eps, c, agg, sel, n, p) in table {
        let s = find(id);
        assert_eq!(s.dp.enabled, eps.is_some(), "{id}");
        if let Some(e) = eps {
            assert_eq!((s.dp.epsilon, s.dp.clip_c), (e, c), "{id}");
            assert!(s.reference.is_some() && s.metrics, "{id}");
        }
        let pr = s.fed.protocol;
        assert_eq!((pr.agg, pr.sel, pr.n_candidates), (agg, sel, n), "{id}");
        if sel == Selection::DeltaR {
            assert_eq!(pr.p_select, p, "{id}");
        }
        assert_eq!(
            (
                s.fed.k_clients,
                s.fed.rounds,
                s.fed.batch_size,
                s.fed.epochs
            ),
            (10, 10, 64, 1)
        );
        assert_eq!(s.fed.alpha, 1.0);
        assert!(s.dp.delta.is_none(), "delta defaults to 1/N_k");
    }
    let extras: Vec<&str> = cells
        .iter()
        .filter(|c| !c.note.is_empty())
        .map(|c| c.id.as_str())
        .collect();
    assert_eq!(extras, ["A2e2", "A0w"]);
    assert!(cells.iter().filter(|c| c.note.is_empty()).count() == 7);
    assert_eq!(find("A2e2").dp.epsilon, 2.0);
}
