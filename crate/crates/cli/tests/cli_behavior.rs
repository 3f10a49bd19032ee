//! Command-line contract tests: exit codes, method dispatch, manifest
//! outputs, and the external-enhancer hook wired through a real child
//! process.

use std::path::Path;
use std::process::Output;

fn zmono(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_zmono"))
        .args(args)
        .output()
        .expect("zmono runs")
}

const DESK_CONFIG: &str = r#"
seed = 3

[simulate]
scene_size = 200.0
boxes = 4
side_min = 20.0
side_max = 40.0
height_min = 8.0
height_max = 14.0
min_gap = 6.0
image_width = 256
image_height = 144
stride = 70.0
gt_samples = 20000
atlas_size = 256
render_views = true

[fit]
grid_res = 32
steps = 30
height_res = 64
tiles = 1

[extract]
resolution = 65

[texture]
atlas_size = 128
basic_epochs = 10
refine_iterations = 1
refine_epochs = 3
view_size = 96
grid_stride = 200.0
grid_margin = 20.0
altitude = 180.0

[eval]
samples = 20000
"#;

struct Scene {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    cfg: std::path::PathBuf,
}

fn build_scene() -> Scene {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = root.join("cfg.toml");
    std::fs::write(&cfg, DESK_CONFIG).unwrap();
    let out = zmono(&[
        "--config",
        cfg.to_str().unwrap(),
        "simulate",
        "--out",
        root.join("sim").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    Scene {
        _dir: dir,
        root,
        cfg,
    }
}

fn run_fit(scene: &Scene) -> std::path::PathBuf {
    let fit = scene.root.join("fit");
    if !fit.exists() {
        let out = zmono(&[
            "--config",
            scene.cfg.to_str().unwrap(),
            "fit",
            "--input",
            scene.root.join("sim/mvs.ply").to_str().unwrap(),
            "--out",
            fit.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    fit
}

#[test]
fn missing_input_exits_2_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = zmono(&[
        "fit",
        "--input",
        "/nonexistent/cloud.ply",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/cloud.ply"), "{stderr}");
}

#[test]
fn extract_method_dispatch_and_bbox() {
    let scene = build_scene();
    let fit = run_fit(&scene);
    for method in ["height", "mc", "naive128"] {
        let out_dir = scene.root.join(format!("ext_{method}"));
        let out = zmono(&[
            "--config",
            scene.cfg.to_str().unwrap(),
            "extract",
            "--tiles",
            fit.join("tiles.json").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--method",
            method,
        ]);
        assert!(
            out.status.success(),
            "method {method}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let mesh = zmono_core::geom::read_obj(out_dir.join("mesh.obj")).unwrap();
        // World-unit output bbox sits within the padded input bbox.
        let (lo, hi) = mesh.bbox().unwrap();
        assert!(lo.x > -30.0 && hi.x < 230.0, "bbox {lo:?} {hi:?}");
        let report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out_dir.join("extract_report.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(report["method"], method);
        assert_eq!(report["watertight"]["boundary_edge_count"], 0);
    }

    let out = zmono(&[
        "--config",
        scene.cfg.to_str().unwrap(),
        "extract",
        "--tiles",
        fit.join("tiles.json").to_str().unwrap(),
        "--out",
        scene.root.join("ext_bad").to_str().unwrap(),
        "--method",
        "bogus",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_of_gt_mesh_is_perfect_and_schema_valid() {
    let scene = build_scene();
    let out_dir = scene.root.join("eval_self");
    let out = zmono(&[
        "--config",
        scene.cfg.to_str().unwrap(),
        "eval",
        "--pred",
        scene.root.join("sim/gt_mesh.obj").to_str().unwrap(),
        "--gt",
        scene.root.join("sim/gt.ply").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("eval_report.json")).unwrap())
            .unwrap();
    // Documented schema fields.
    for key in ["precision", "recall", "f1", "chamfer", "chamfer_convention", "d_tau"] {
        assert!(
            report["geometry"].get(key).is_some(),
            "missing geometry.{key}"
        );
    }
    assert_eq!(report["geometry"]["precision"], 1.0);
    assert_eq!(report["geometry"]["recall"], 1.0);
    assert_eq!(report["geometry"]["f1"], 1.0);
    // Chamfer of a mesh against its own samples is tiny but not zero;
    // identical clouds give exactly zero, checked at the unit level.
    assert!(report["geometry"]["chamfer"].as_f64().unwrap() < 0.02);
}

#[test]
fn texture_hook_failure_exits_4_and_demo_enhancer_halves_brightness() {
    let scene = build_scene();
    let fit = run_fit(&scene);
    let ext = scene.root.join("ext_tex");
    let out = zmono(&[
        "--config",
        scene.cfg.to_str().unwrap(),
        "extract",
        "--tiles",
        fit.join("tiles.json").to_str().unwrap(),
        "--out",
        ext.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    // Failing hook: exit code 4 naming the failure.
    let bad_cfg = scene.root.join("bad_hook.toml");
    std::fs::write(
        &bad_cfg,
        DESK_CONFIG.replace(
            "altitude = 180.0",
            "altitude = 180.0\nhook = \"command:false # {in} {out}\"",
        ),
    )
    .unwrap();
    let out = zmono(&[
        "--config",
        bad_cfg.to_str().unwrap(),
        "texture",
        "--mesh",
        ext.join("mesh.obj").to_str().unwrap(),
        "--cameras",
        scene.root.join("sim/cameras_train.txt").to_str().unwrap(),
        "--views",
        scene.root.join("sim/views").to_str().unwrap(),
        "--out",
        scene.root.join("tex_bad").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    // Brightness-halving external enhancer: covered texels converge toward
    // half brightness relative to the basic atlas.
    let enhancer = env!("CARGO_BIN_EXE_demo-enhancer");
    let half_cfg = scene.root.join("half_hook.toml");
    std::fs::write(
        &half_cfg,
        DESK_CONFIG
            .replace(
                "altitude = 180.0",
                &format!("altitude = 180.0\nhook = \"command:{enhancer} {{in}} {{out}} 0.5\""),
            )
            .replace("refine_iterations = 1", "refine_iterations = 2")
            .replace("refine_epochs = 3", "refine_epochs = 12"),
    )
    .unwrap();
    let tex_dir = scene.root.join("tex_half");
    let out = zmono(&[
        "--config",
        half_cfg.to_str().unwrap(),
        "texture",
        "--mesh",
        ext.join("mesh.obj").to_str().unwrap(),
        "--cameras",
        scene.root.join("sim/cameras_train.txt").to_str().unwrap(),
        "--views",
        scene.root.join("sim/views").to_str().unwrap(),
        "--out",
        tex_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let basic = zmono_core::texture::TextureAtlas::load_png(tex_dir.join("atlas_basic.png")).unwrap();
    let final_atlas =
        zmono_core::texture::TextureAtlas::load_png(tex_dir.join("atlas_final.png")).unwrap();
    // Compare mean brightness on texels that clearly belong to charts in
    // both (away from the sentinel fill).
    let sentinel = zmono_core::texture::SENTINEL;
    let mut sum_basic = 0.0f64;
    let mut sum_final = 0.0f64;
    let mut n = 0usize;
    for (b, f) in basic.rgb.iter().zip(&final_atlas.rgb) {
        let is_sentinel = |c: &[f32; 3]| {
            (c[0] - sentinel[0]).abs() < 0.02
                && (c[1] - sentinel[1]).abs() < 0.02
                && (c[2] - sentinel[2]).abs() < 0.02
        };
        if !is_sentinel(b) {
            sum_basic += (b[0] + b[1] + b[2]) as f64;
            sum_final += (f[0] + f[1] + f[2]) as f64;
            n += 1;
        }
    }
    let ratio = sum_final / sum_basic;
    assert!(n > 500, "only {n} chart texels");
    assert!(
        ratio < 0.55,
        "brightness ratio {ratio:.3}; expected convergence toward 0.5x or below after two halving iterations"
    );
}

#[test]
fn simulate_camera_file_carries_derived_fov() {
    let scene = build_scene();
    let cams =
        zmono_core::camera::read_camera_list(scene.root.join("sim/cameras_train.txt")).unwrap();
    assert!(cams.len() >= 2);
    // The capture FOV follows from the configured GSD (0.31 m/px at 2 km,
    // 2560 px wide in the full-scale protocol; the desk config keeps the
    // same GSD chain at its own width). Here: exact formula value.
    let expect = zmono_core::camera::fov_from_gsd(2000.0, 256.0, 0.31);
    for c in &cams {
        assert!((c.fov_deg - expect).abs() < 1e-9);
    }
    // At full protocol parameters the derived FOV is 22.44°, the quoted
    // protocol value up to its own rounding (22.42).
    let full = zmono_core::camera::fov_from_gsd(2000.0, 2560.0, 0.31);
    assert!((full - 22.4436).abs() < 1e-3);
}

#[test]
fn rerun_from_manifest_reproduces_checkpoint_hashes() {
    let scene = build_scene();
    let fit_a = run_fit(&scene);
    let fit_b = scene.root.join("fit_rerun");
    let out = zmono(&[
        "--from-manifest",
        fit_a.join("manifest.json").to_str().unwrap(),
        "fit",
        "--out",
        fit_b.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let hash = |p: &Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
    };
    let ma = hash(&fit_a.join("manifest.json"));
    let mb = hash(&fit_b.join("manifest.json"));
    let set = |m: &serde_json::Value| -> Vec<(String, String)> {
        m["outputs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|o| {
                (
                    Path::new(o["path"].as_str().unwrap())
                        .file_name()
                        .unwrap()
                        .to_string_lossy()
                        .into_owned(),
                    o["sha256"].as_str().unwrap().to_string(),
                )
            })
            .collect()
    };
    assert_eq!(set(&ma), set(&mb));
}
