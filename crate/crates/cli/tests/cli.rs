use std::path::Path;
use std::process::{Command, Output};

fn irmap(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irmap"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn cube_stl(side: f64, height: f64) -> String {
    let h = side / 2.0;
    let v = |i: usize| {
        (
            if i & 1 == 0 { -h } else { h },
            if i & 2 == 0 { -h } else { h },
            if i & 4 == 0 { 0.0 } else { height },
        )
    };
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let mut s = String::from("solid cube\n");
    for q in quads {
        for tri in [[q[0], q[1], q[2]], [q[0], q[2], q[3]]] {
            s.push_str("facet normal 0 0 0\nouter loop\n");
            for i in tri {
                let (x, y, z) = v(i);
                s.push_str(&format!("vertex {x} {y} {z}\n"));
            }
            s.push_str("endloop\nendfacet\n");
        }
    }
    s.push_str("endsolid cube\n");
    s
}

/// A two-layer, 64×64-pixel build small enough for debug runs.
fn small_build(dir: &Path) {
    std::fs::write(dir.join("cube.stl"), cube_stl(3.6, 0.08)).unwrap();
    std::fs::write(
        dir.join("sim.toml"),
        r#"seed = 5
frames_per_layer = 40
stl = ["cube.stl"]
noise_sigma_counts = 20.0

[grid]
width = 64
height = 64

[spatter]
per_layer = 1
"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("run.toml"),
        r#"[paths]
simulation = "sim.toml"
output = "out/store.irvx"

[extraction]
offset_frames = 3
cooling_window = 5
"#,
    )
    .unwrap();
}

#[test]
fn missing_stl_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "[paths]\nframes_dir = \".\"\nstl = [\"nowhere/part.stl\"]\n",
    )
    .unwrap();
    let o = irmap(&["extract", "--config", "run.toml"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere/part.stl"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = irmap(&["extract", "--config", "absent.toml"], dir.path());
    assert_eq!(code(&o), 2);
    std::fs::write(dir.path().join("bad.toml"), "jobs = 0\n").unwrap();
    assert_eq!(code(&irmap(&["extract", "--config", "bad.toml"], dir.path())), 2);
    std::fs::write(dir.path().join("typo.toml"), "jbos = 2\n").unwrap();
    assert_eq!(code(&irmap(&["extract", "--config", "typo.toml"], dir.path())), 2);
    small_build(dir.path());
    let o = irmap(&["extract", "--config", "run.toml", "--features", "interpass,bogus"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = irmap(&["extract", "--config", "run.toml", "--layers", "0..9"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn corrupt_store_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.irvx"), b"not a store at all").unwrap();
    let o = irmap(&["report", "--store", "junk.irvx"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = irmap(&["report", "--store", "absent.irvx"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn degenerate_calibration_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.csv"), "5000,300\n5100,310\n").unwrap();
    let o = irmap(&["calibrate-thermal", "--samples", "s.csv"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn simulate_extract_export_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_build(d);

    let o = irmap(&["simulate", "--config", "run.toml", "--out", "frames"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("frames/spatter_truth.csv").exists());

    // The same build read back from disk, with features and jobs overridden.
    std::fs::write(
        d.join("frames.toml"),
        "layer_thickness_um = 40.0\n[grid]\nwidth = 64\nheight = 64\n[paths]\nframes_dir = \"frames\"\nstl = [\"cube.stl\"]\n[extraction]\noffset_frames = 3\ncooling_window = 5\n",
    )
    .unwrap();
    let o = irmap(
        &["extract", "--config", "frames.toml", "--features", "scan_order,interpass", "--jobs", "2", "--out", "f.irvx"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = irmap(&["report", "--store", "f.irvx"], d);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("scan_order") && text.contains("interpass") && !text.contains("cooling_rate"), "{text}");
    assert!(text.contains("reduction"), "{text}");

    let o = irmap(&["extract", "--config", "run.toml"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let store = d.join("out/store.irvx");
    let first = std::fs::read(&store).unwrap();
    let manifest = std::fs::read_to_string(d.join("out/store.irvx.manifest.toml")).unwrap();
    assert!(manifest.contains("sha256") && manifest.contains("[reduction]"));

    let o = irmap(&["extract", "--config", "run.toml"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(first, std::fs::read(&store).unwrap(), "rerun changed the store");

    let o = irmap(
        &["export", "--store", "out/store.irvx", "--layer", "0", "--feature", "scan_order", "--format", "vtk", "--out", "s.vtk"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let vtk = std::fs::read_to_string(d.join("s.vtk")).unwrap();
    assert!(vtk.contains("STRUCTURED_POINTS") && vtk.contains("SCALARS scan_order"));

    let o = irmap(&["export", "--store", "out/store.irvx", "--layer", "1", "--feature", "interpass"], d);
    assert_eq!(code(&o), 0);
    let csv = String::from_utf8_lossy(&o.stdout);
    assert!(csv.starts_with("i,j,layer,value\n"));
    assert!(csv.lines().count() > 50, "{csv}");

    let o = irmap(&["export", "--store", "out/store.irvx", "--layer", "7", "--feature", "interpass"], d);
    assert_eq!(code(&o), 3, "absent layer is a data error");
}

#[test]
fn calibrate_spatial_writes_homography() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Identity camera: markers land where the corrected grid puts them.
    let mut s = String::new();
    for (x, y) in [(-75.0, -75.0), (75.0, -75.0), (75.0, 75.0), (-75.0, 75.0)] {
        let px = 160.0 + x / 0.36;
        let py = 120.0 + y / 0.36;
        s.push_str(&format!("{x},{y},{px},{py}\n"));
    }
    std::fs::write(d.join("corr.csv"), s).unwrap();
    let o = irmap(&["calibrate-spatial", "--points", "corr.csv", "--out", "h.toml"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: toml::Table = std::fs::read_to_string(d.join("h.toml")).unwrap().parse().unwrap();
    let rows = doc["homography"].as_array().unwrap();
    let h00 = rows[0].as_array().unwrap()[0].as_float().unwrap();
    let h22 = rows[2].as_array().unwrap()[2].as_float().unwrap();
    assert!((h00 / h22 - 1.0).abs() < 1e-4);
    assert!(doc["max_residual_px"].as_float().unwrap() < 1e-6);
}
