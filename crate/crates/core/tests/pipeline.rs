//! Cross-module pipeline checks on small synthetic scenes: facade
//! recovery from facade-free sampling, interior height accuracy against
//! the exact ground truth, and watertightness of merged tiled outputs.

use zmono_core::extract::{extract_height_mesh, extract_tile_mesh, merge_tiles, watertight_check};
use zmono_core::fit::{fit, fit_tiled, FitConfig, Rect};
use zmono_core::geom::{normalize_cloud, NormalizeTransform, TriMesh, Vec3};
use zmono_core::synth::{gen_city, sample_mvs, BoxCity, CityParams, MvsSamplingProfile};

fn small_city(seed: u64) -> BoxCity {
    gen_city(&CityParams {
        bounds: Rect {
            x0: 0.0,
            y0: 0.0,
            x1: 400.0,
            y1: 400.0,
        },
        ground_z: 0.0,
        count: 6,
        side_range: (40.0, 90.0),
        height_range: (10.0, 25.0),
        min_gap: 12.0,
        seed,
    })
    .unwrap()
}

/// Noise-free, facade-free sampling still yields correct roofs and
/// vertical facades after fitting: the central well-posedness property of
/// the z-monotone representation.
#[test]
fn facade_free_sampling_recovers_geometry() {
    let city = small_city(3);
    let profile = MvsSamplingProfile {
        roof_density: 0.5,
        ground_density: 0.5,
        facade_density: 0.0,
        sigma_z: 0.0,
        dropout: 0.0,
    };
    let cloud = sample_mvs(&city, &profile, 17).unwrap();
    let (ncloud, transform) = normalize_cloud(&cloud, 0.02).unwrap();

    let g = 64;
    let cfg = FitConfig {
        grid_res: g,
        height_res: 128,
        steps: 200,
        ..FitConfig::default()
    };
    let (field, report) = fit(&ncloud, &cfg).unwrap();
    assert!(report.total_loss.last().unwrap() <= &report.total_loss[0]);

    // Interior accuracy: grid-cell centers farther than 2 cells from any
    // footprint edge match the exact height function within 2 z-quanta.
    let cell_w = 2.0 / g as f64 / transform.scale_xy;
    let quant = 2.0 / g as f64 / transform.scale_z;
    let mut sq = 0.0;
    let mut n = 0;
    for gy in 0..g {
        for gx in 0..g {
            let xn = -1.0 + (gx as f64 + 0.5) * 2.0 / g as f64;
            let yn = -1.0 + (gy as f64 + 0.5) * 2.0 / g as f64;
            let w = transform.to_world(Vec3::new(xn, yn, 0.0));
            if !city.bounds.contains(w.x, w.y) {
                continue;
            }
            // Distance to the nearest footprint edge.
            let near_edge = city.boxes.iter().any(|b| {
                let f = &b.footprint;
                let dx = (w.x - f.x0).abs().min((w.x - f.x1).abs());
                let dy = (w.y - f.y0).abs().min((w.y - f.y1).abs());
                let inside_x = w.x >= f.x0 && w.x <= f.x1;
                let inside_y = w.y >= f.y0 && w.y <= f.y1;
                (inside_y && dx < 2.0 * cell_w)
                    || (inside_x && dy < 2.0 * cell_w)
                    || (dx < 2.0 * cell_w && dy < 2.0 * cell_w)
            });
            // Also keep clear of the scene boundary.
            let near_bound = w.x < 2.0 * cell_w
                || w.y < 2.0 * cell_w
                || w.x > 400.0 - 2.0 * cell_w
                || w.y > 400.0 - 2.0 * cell_w;
            if near_edge || near_bound {
                continue;
            }
            let pred = field.height_of(xn, yn).unwrap().z;
            let pred_w = transform.to_world(Vec3::new(xn, yn, pred)).z;
            // Accumulate in normalized z units for the quanta comparison.
            let dn = (pred_w - city.gt_height(w.x, w.y)) * transform.scale_z;
            sq += dn * dn;
            n += 1;
        }
    }
    let rmse_norm = (sq / n as f64).sqrt();
    assert!(
        rmse_norm < 2.0 * (2.0 / g as f64),
        "interior RMSE {rmse_norm} (normalized) vs {}",
        2.0 * (2.0 / g as f64)
    );

    // Roof-specific: at least 95% of interior roof cells land within two
    // z-quanta of the true roof height.
    let mut roof_ok = 0usize;
    let mut roof_n = 0usize;
    for b in &city.boxes {
        let inset = 2.0 * cell_w;
        let (x0, y0) = (b.footprint.x0 + inset, b.footprint.y0 + inset);
        let (x1, y1) = (b.footprint.x1 - inset, b.footprint.y1 - inset);
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        let probes = 8;
        for iy in 0..probes {
            for ix in 0..probes {
                let x = x0 + (x1 - x0) * (ix as f64 + 0.5) / probes as f64;
                let y = y0 + (y1 - y0) * (iy as f64 + 0.5) / probes as f64;
                let pn = transform.to_normalized(Vec3::new(x, y, 0.0));
                let h = field.height_of(pn.x, pn.y).unwrap().z;
                let hw = transform.to_world(Vec3::new(pn.x, pn.y, h)).z;
                roof_n += 1;
                if (hw - b.roof_z).abs() * transform.scale_z <= quant {
                    roof_ok += 1;
                }
            }
        }
    }
    assert!(roof_n > 100);
    let frac = roof_ok as f64 / roof_n as f64;
    assert!(frac >= 0.95, "only {frac:.3} of roof cells within 2 z-quanta");

    // Facade property: mesh height just inside vs just outside a footprint
    // edge spans the box height within 2 voxels even though no facade was
    // ever observed.
    let mesh = extract_height_mesh(&field, 257);
    let b = &city.boxes[0];
    let cx = 0.5 * (b.footprint.x0 + b.footprint.x1);
    let cy = 0.5 * (b.footprint.y0 + b.footprint.y1);
    let h_at = |xw: f64, yw: f64| {
        let pn = transform.to_normalized(Vec3::new(xw, yw, 0.0));
        let h = field.height_of(pn.x, pn.y).unwrap().z;
        transform.to_world(Vec3::new(pn.x, pn.y, h)).z
    };
    let span = h_at(cx, cy) - h_at(b.footprint.x0 - 3.0 * cell_w, cy);
    let gt_span = b.roof_z - city.ground_z;
    let tol = 2.0 * (2.0 / g as f64) / transform.scale_z;
    assert!(
        (span - gt_span).abs() < tol,
        "facade span {span} vs {gt_span} (tol {tol})"
    );
    let check = watertight_check(&mesh);
    assert!(check.is_watertight(), "{check}");
}

#[test]
fn tiled_fit_merge_watertight_on_seeded_scenes() {
    for seed in [1u64, 2, 3] {
        let city = small_city(seed);
        let profile = MvsSamplingProfile {
            roof_density: 0.3,
            ground_density: 0.3,
            sigma_z: 0.1,
            ..MvsSamplingProfile::default()
        };
        let cloud = sample_mvs(&city, &profile, seed ^ 0xbeef).unwrap();
        let cfg = FitConfig {
            grid_res: 24,
            height_res: 48,
            steps: 8,
            ..FitConfig::default()
        };
        let tiles = fit_tiled(&cloud, 2, 0.1, &cfg).unwrap();
        let parts: Vec<(TriMesh, NormalizeTransform, Rect)> = tiles
            .iter()
            .map(|t| (extract_tile_mesh(t, 33), t.transform, t.core))
            .collect();
        let (merged, _) = merge_tiles(&parts, 1e-6);
        let check = watertight_check(&merged);
        assert!(check.is_watertight(), "seed {seed}: {check}");
    }
}
