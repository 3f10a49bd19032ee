//! The five pipeline stages. Stages communicate through files (PLY, OBJ,
//! checkpoints, PNG, JSON) so each is testable and re-runnable in
//! isolation; every stage writes a run manifest.

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;
use zmono_core::camera::{fov_from_gsd, test_grid, training_grid, write_camera_list, TestGridConfig};
use zmono_core::extract::{
    extract_tile_mesh, marching_cubes, merge_tiles, naive_mc_baseline, sample_sdf_rect,
    watertight_check, MergeReport, WatertightReport,
};
use zmono_core::field::ZMonoField;
use zmono_core::fit::{fit_tiled, FittedTile, Rect};
use zmono_core::geom::{
    normalize_cloud, read_obj, read_ply, write_obj, write_ply, Frame, NormalizeTransform,
    ObjMaterial, PointCloud, TriMesh, Vec3,
};
use zmono_core::metrics::{image_report, prf, psnr_sentinel, sample_mesh};
use zmono_core::raster::ColorImage;
use zmono_core::synth::{gen_city, gt_mesh, sample_mvs, write_scene, CityParams, MvsSamplingProfile};
use zmono_core::texture::{
    assign_uvs, bake_basic, refine, render_with_atlas, BakeConfig, RefineConfig, TextureAtlas,
};

/// Index of the per-tile outputs of a fit run; the contract between
/// `fit` and `extract`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TilesFile {
    pub input_cloud: PathBuf,
    pub global_transform: NormalizeTransform,
    pub tiles: Vec<TileRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TileRecord {
    pub checkpoint: PathBuf,
    pub transform: NormalizeTransform,
    pub core: Rect,
    pub degenerate: bool,
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn city_params(cfg: &RunConfig) -> CityParams {
    let s = &cfg.simulate;
    CityParams {
        bounds: Rect {
            x0: 0.0,
            y0: 0.0,
            x1: s.scene_size,
            y1: s.scene_size,
        },
        ground_z: 0.0,
        count: s.boxes,
        side_range: (s.side_min, s.side_max),
        height_range: (s.height_min, s.height_max),
        min_gap: s.min_gap,
        seed: cfg.seed,
    }
}

/// Triangles of the visible surface (top + facades): everything at or
/// above ground level. Closure artifacts (bottom plate, below-ground
/// skirt) are excluded from ground-truth sampling.
pub fn visible_submesh(mesh: &TriMesh, ground_z: f64) -> TriMesh {
    let keep: Vec<[u32; 3]> = mesh
        .triangles
        .iter()
        .filter(|t| {
            t.iter()
                .all(|&v| mesh.vertices[v as usize].z >= ground_z - 1e-9)
        })
        .copied()
        .collect();
    let mut out = TriMesh {
        vertices: mesh.vertices.clone(),
        triangles: keep,
        uvs: mesh.uvs.clone(),
    };
    out.compact();
    out
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("simulate", cfg.clone());
    let t0 = Instant::now();
    let s = &cfg.simulate;

    let city = gen_city(&city_params(cfg))?;
    let scene_path = out.join("scene.txt");
    write_scene(&city, &scene_path)?;

    let mesh = gt_mesh(&city);
    let mesh_path = out.join("gt_mesh.obj");
    write_obj(&mesh, &mesh_path, None)?;

    let visible = visible_submesh(&mesh, city.ground_z);
    let gt_cloud = sample_mesh(&visible, s.gt_samples, cfg.seed ^ 0x6774)?;
    let gt_path = out.join("gt.ply");
    write_ply(&gt_cloud, &gt_path)?;

    let profile = MvsSamplingProfile {
        roof_density: s.roof_density,
        ground_density: s.ground_density,
        facade_density: s.facade_density,
        sigma_z: s.sigma_z,
        dropout: s.dropout,
    };
    let mvs = sample_mvs(&city, &profile, cfg.seed ^ 0x6d76)?;
    let mvs_path = out.join("mvs.ply");
    write_ply(&mvs, &mvs_path)?;
    manifest.time("scene_s", t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let fov = fov_from_gsd(s.altitude, s.image_width as f64, s.gsd);
    let train = training_grid(
        city.bounds,
        s.altitude,
        fov,
        s.stride,
        s.image_width,
        s.image_height,
        s.overlap,
    )?;
    let cam_train_path = out.join("cameras_train.txt");
    write_camera_list(&train.cameras, &cam_train_path)?;

    // Test protocol over the central 40% of the scene.
    let (bx, by) = city.bounds.span();
    let test_region = Rect {
        x0: city.bounds.x0 + 0.3 * bx,
        y0: city.bounds.y0 + 0.3 * by,
        x1: city.bounds.x1 - 0.3 * bx,
        y1: city.bounds.y1 - 0.3 * by,
    };
    let test = test_grid(test_region, &TestGridConfig::default())?;
    let cam_test_path = out.join("cameras_test.txt");
    write_camera_list(&test.cameras, &cam_test_path)?;

    let views_dir = out.join("views");
    if s.render_views {
        ensure_dir(&views_dir)?;
        let (uv_mesh, atlas) = zmono_core::synth::gt_textured(&city, s.atlas_size)?;
        atlas.save_png(out.join("gt_atlas.png"))?;
        for (i, cam) in train.cameras.iter().enumerate() {
            let img = render_with_atlas(&uv_mesh, &atlas, cam, [0.0; 3]);
            img.save_png(views_dir.join(format!("train_{i:04}.png")))?;
        }
    }
    manifest.time("capture_s", t1.elapsed().as_secs_f64());
    manifest.time("total_s", t0.elapsed().as_secs_f64());

    for p in [&scene_path, &mesh_path, &gt_path, &mvs_path, &cam_train_path, &cam_test_path] {
        manifest.add_output(p)?;
    }
    manifest.save(out.join("manifest.json"))?;
    log::info!(
        "simulate: {} boxes, {} mvs points, {} training views",
        city.boxes.len(),
        mvs.len(),
        train.cameras.len()
    );
    Ok(())
}

pub fn cmd_fit(cfg: &RunConfig, input: &Path, out: &Path) -> anyhow::Result<()> {
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("fit", cfg.clone());
    manifest.add_input(input)?;
    let t0 = Instant::now();

    let cloud = read_ply(input)?;
    let core_cfg = cfg.fit.to_core(cfg.seed);
    let tiles = fit_tiled(&cloud, cfg.fit.tiles, cfg.fit.overlap, &core_cfg)?;

    let (_, global_transform) = normalize_cloud(&cloud, cfg.fit.padding)?;
    let mut records = Vec::with_capacity(tiles.len());
    let mut reports = Vec::new();
    for (i, tile) in tiles.iter().enumerate() {
        let n = cfg.fit.tiles;
        let name = format!("tile_{}_{}.zmf", i % n, i / n);
        let path = out.join(&name);
        tile.field.save(&path)?;
        records.push(TileRecord {
            checkpoint: PathBuf::from(&name),
            transform: tile.transform,
            core: tile.core,
            degenerate: tile.report.is_none(),
        });
        reports.push(&tile.report);
        manifest.add_output(&path)?;
    }

    let tiles_file = TilesFile {
        input_cloud: input.to_path_buf(),
        global_transform,
        tiles: records,
    };
    let tiles_path = out.join("tiles.json");
    std::fs::write(&tiles_path, serde_json::to_string_pretty(&tiles_file)?)?;
    manifest.add_output(&tiles_path)?;

    // Loss traces carry wall times, so the report stays out of the hashed
    // output set.
    std::fs::write(
        out.join("fit_report.json"),
        serde_json::to_string_pretty(&reports)?,
    )?;

    manifest.time("total_s", t0.elapsed().as_secs_f64());
    manifest.save(out.join("manifest.json"))?;
    let final_loss: Vec<f64> = tiles
        .iter()
        .filter_map(|t| t.report.as_ref().and_then(|r| r.total_loss.last().copied()))
        .collect();
    log::info!("fit: {} tiles, final losses {:?}", tiles.len(), final_loss);
    Ok(())
}

fn load_tiles(tiles_path: &Path) -> anyhow::Result<(TilesFile, Vec<FittedTile>)> {
    let text = std::fs::read_to_string(tiles_path)
        .with_context(|| format!("{}", tiles_path.display()))?;
    let file: TilesFile = serde_json::from_str(&text)?;
    let dir = tiles_path.parent().unwrap_or(Path::new("."));
    let mut tiles = Vec::with_capacity(file.tiles.len());
    for rec in &file.tiles {
        let field = ZMonoField::load(dir.join(&rec.checkpoint))?;
        tiles.push(FittedTile {
            field,
            transform: rec.transform,
            core: rec.core,
            report: None,
        });
    }
    Ok((file, tiles))
}

#[derive(Debug, Serialize)]
struct ExtractReport {
    method: String,
    watertight: WatertightReport,
    merge: Option<MergeReport>,
}

pub fn cmd_extract(cfg: &RunConfig, tiles_path: &Path, out: &Path) -> anyhow::Result<()> {
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("extract", cfg.clone());
    manifest.add_input(tiles_path)?;
    let t0 = Instant::now();

    let (file, tiles) = load_tiles(tiles_path)?;
    let method = cfg.extract.method.as_str();

    let (mesh, merge) = match method {
        "height" => {
            let parts: Vec<(TriMesh, NormalizeTransform, Rect)> = tiles
                .iter()
                .map(|t| (extract_tile_mesh(t, cfg.extract.resolution), t.transform, t.core))
                .collect();
            let (mesh, report) = merge_tiles(&parts, cfg.extract.weld_tol);
            (mesh, Some(report))
        }
        "mc" => {
            let parts: Vec<(TriMesh, NormalizeTransform, Rect)> = tiles
                .iter()
                .map(|t| {
                    let lo = t.transform.to_normalized(Vec3::new(t.core.x0, t.core.y0, 0.0));
                    let hi = t.transform.to_normalized(Vec3::new(t.core.x1, t.core.y1, 0.0));
                    let grid = sample_sdf_rect(
                        &t.field,
                        cfg.extract.mc_resolution,
                        Rect {
                            x0: lo.x,
                            y0: lo.y,
                            x1: hi.x,
                            y1: hi.y,
                        },
                    );
                    (marching_cubes(&grid, 0.0), t.transform, t.core)
                })
                .collect();
            let (mesh, report) = merge_tiles(&parts, cfg.extract.weld_tol);
            (mesh, Some(report))
        }
        "naive128" | "naive256" => {
            let res = if method == "naive128" { 128 } else { 256 };
            let input = if file.input_cloud.is_absolute() {
                file.input_cloud.clone()
            } else {
                tiles_path
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(&file.input_cloud)
            };
            let cloud = read_ply(&input)?;
            let normalized = file.global_transform.apply_cloud(&cloud);
            let mesh = naive_mc_baseline(&normalized, res)?;
            (mesh.to_world(&file.global_transform), None)
        }
        other => bail!("unknown extraction method '{other}' (height|mc|naive128|naive256)"),
    };

    let report = ExtractReport {
        method: method.into(),
        watertight: watertight_check(&mesh),
        merge,
    };
    log::info!("extract[{method}]: {}", report.watertight);
    if let Some(m) = &report.merge {
        for seam in m.unstitched() {
            log::warn!(
                "seam between tiles {:?} not stitched: gap {:.3e} m",
                seam.tiles,
                seam.gap
            );
        }
    }

    let mesh_path = out.join("mesh.obj");
    write_obj(&mesh, &mesh_path, None)?;
    std::fs::write(
        out.join("extract_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    manifest.add_output(&mesh_path)?;
    manifest.add_output(out.join("extract_report.json"))?;
    manifest.time("total_s", t0.elapsed().as_secs_f64());
    manifest.save(out.join("manifest.json"))?;
    Ok(())
}

fn load_views(views_dir: &Path) -> anyhow::Result<Vec<(String, ColorImage)>> {
    let mut names: Vec<String> = std::fs::read_dir(views_dir)
        .with_context(|| format!("{}", views_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for n in names {
        out.push((n.clone(), ColorImage::load_png(views_dir.join(&n))?));
    }
    Ok(out)
}

pub fn cmd_texture(
    cfg: &RunConfig,
    mesh_path: &Path,
    cameras_path: &Path,
    views_dir: &Path,
    out: &Path,
    basic_only: bool,
) -> anyhow::Result<()> {
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("texture", cfg.clone());
    manifest.add_input(mesh_path)?;
    manifest.add_input(cameras_path)?;
    manifest.add_input_dir(views_dir)?;
    let t0 = Instant::now();

    let mesh = read_obj(mesh_path)?;
    let cameras = zmono_core::camera::read_camera_list(cameras_path)?;
    let views = load_views(views_dir)?;
    if cameras.len() != views.len() {
        bail!(
            "{} cameras but {} view images in {}",
            cameras.len(),
            views.len(),
            views_dir.display()
        );
    }

    let charted = assign_uvs(&mesh, cfg.texture.atlas_size)?;
    let pairs: Vec<(ColorImage, zmono_core::camera::PinholeCamera)> = views
        .into_iter()
        .map(|(_, img)| img)
        .zip(cameras.iter().cloned())
        .collect();

    let bake_cfg = BakeConfig {
        atlas_size: cfg.texture.atlas_size,
        epochs: cfg.texture.basic_epochs,
        lambda_mse: cfg.texture.lambda_mse,
        lambda_ssim: cfg.texture.lambda_ssim,
        ..BakeConfig::default()
    };
    let basic = bake_basic(&charted, &pairs, &bake_cfg)?;
    let basic_path = out.join("atlas_basic.png");
    basic.atlas.save_png(&basic_path)?;
    manifest.add_output(&basic_path)?;
    manifest.time("bake_s", t0.elapsed().as_secs_f64());

    let final_atlas: TextureAtlas = if basic_only {
        basic.atlas
    } else {
        let t1 = Instant::now();
        let hook = cfg.texture.hook()?;
        let refine_cfg = RefineConfig {
            iterations: cfg.texture.refine_iterations,
            epochs_per_iteration: cfg.texture.refine_epochs,
            grid_stride: cfg.texture.grid_stride,
            grid_margin: cfg.texture.grid_margin,
            altitude: cfg.texture.altitude,
            pitch_deg: cfg.texture.pitch_deg,
            view_size: cfg.texture.view_size,
            background: [0.0; 3],
        };
        let work = out.join("hook_work");
        ensure_dir(&work)?;
        let outcome = refine(&charted, basic.atlas, &hook, &refine_cfg, &work)?;
        manifest.time("refine_s", t1.elapsed().as_secs_f64());
        if let Some(msg) = outcome.aborted {
            // Persist the last good atlas before surfacing the failure.
            outcome.atlas.save_png(out.join("atlas_final.png"))?;
            return Err(anyhow::Error::new(zmono_core::Error::HookFailed {
                view: outcome.completed_iterations,
                msg,
            }));
        }
        outcome.atlas
    };

    let final_path = out.join("atlas_final.png");
    final_atlas.save_png(&final_path)?;
    manifest.add_output(&final_path)?;

    let textured_path = out.join("textured.obj");
    write_obj(
        &charted,
        &textured_path,
        Some(&ObjMaterial {
            name: "atlas".into(),
            texture: "atlas_final.png".into(),
        }),
    )?;
    manifest.add_output(&textured_path)?;
    manifest.time("total_s", t0.elapsed().as_secs_f64());
    manifest.save(out.join("manifest.json"))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    geometry: zmono_core::metrics::GeoMetricReport,
    images: Vec<EvalImageRow>,
    psnr_mean: Option<f64>,
    ssim_mean: Option<f64>,
}

#[derive(Debug, Serialize)]
struct EvalImageRow {
    name: String,
    psnr: f64,
    ssim: f64,
}

/// Central-crop both clouds to the evaluation region, drop closure
/// artifacts below the ground-truth floor, and normalize both with one
/// shared transform.
pub fn crop_and_normalize(
    pred: &PointCloud,
    gt: &PointCloud,
    crop: f64,
    z_floor_margin: f64,
) -> anyhow::Result<(PointCloud, PointCloud)> {
    let (lo, hi) = gt.bbox().context("empty ground-truth cloud")?;
    let margin_x = (hi.x - lo.x) * (1.0 - crop) * 0.5;
    let margin_y = (hi.y - lo.y) * (1.0 - crop) * 0.5;
    let rect = Rect {
        x0: lo.x + margin_x,
        y0: lo.y + margin_y,
        x1: hi.x - margin_x,
        y1: hi.y - margin_y,
    };
    let z_floor = lo.z - z_floor_margin;
    let filter = |c: &PointCloud| -> Vec<Vec3> {
        c.points
            .iter()
            .filter(|p| rect.contains(p.x, p.y) && p.z >= z_floor)
            .copied()
            .collect()
    };
    let gt_pts = filter(gt);
    let pred_pts = filter(pred);
    if gt_pts.is_empty() || pred_pts.is_empty() {
        bail!("evaluation crop left an empty cloud");
    }
    let gt_crop = PointCloud::new(gt_pts, Frame::World);
    let (lo, hi) = gt_crop.bbox().unwrap();
    let transform = zmono_core::geom::normalize_transform_for_bbox(lo, hi, 0.0);
    Ok((
        transform.apply_cloud(&PointCloud::new(pred_pts, Frame::World)),
        transform.apply_cloud(&gt_crop),
    ))
}

pub fn cmd_eval(
    cfg: &RunConfig,
    pred_path: &Path,
    gt_path: &Path,
    out: &Path,
    pred_views: Option<&Path>,
    gt_views: Option<&Path>,
) -> anyhow::Result<()> {
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("eval", cfg.clone());
    manifest.add_input(pred_path)?;
    manifest.add_input(gt_path)?;
    let t0 = Instant::now();

    let pred_mesh = read_obj(pred_path)?;
    let gt_cloud = read_ply(gt_path)?;
    // Sample the prediction with the same protocol the simulator uses for
    // ground truth: closure triangles below the ground-truth floor are
    // cropped before sampling, and the sampling stream is the same, so
    // evaluating a mesh against its own ground-truth samples is exact.
    let (gt_lo, _) = gt_cloud.bbox().ok_or(zmono_core::Error::EmptyCloud)?;
    let z_floor = gt_lo.z - cfg.eval.z_floor_margin;
    let pred_visible = visible_submesh(&pred_mesh, z_floor);
    let pred_cloud = sample_mesh(&pred_visible, cfg.eval.samples, cfg.seed ^ 0x6774)?;
    let pred_cloud = PointCloud::new(pred_cloud.points, Frame::World);

    let (pred_n, gt_n) =
        crop_and_normalize(&pred_cloud, &gt_cloud, cfg.eval.crop, cfg.eval.z_floor_margin)?;
    let geometry = prf(&pred_n, &gt_n, cfg.eval.d_tau)?;

    let mut images = Vec::new();
    if let (Some(pv), Some(gv)) = (pred_views, gt_views) {
        let pred_imgs = load_views(pv)?;
        let gt_imgs = load_views(gv)?;
        if pred_imgs.len() != gt_imgs.len() {
            bail!("view count mismatch: {} vs {}", pred_imgs.len(), gt_imgs.len());
        }
        for ((name, a), (_, b)) in pred_imgs.iter().zip(&gt_imgs) {
            let r = image_report(a, b, None)?;
            images.push(EvalImageRow {
                name: name.clone(),
                psnr: psnr_sentinel(r.psnr),
                ssim: r.ssim,
            });
        }
    }
    let psnr_mean = (!images.is_empty())
        .then(|| images.iter().map(|r| r.psnr).sum::<f64>() / images.len() as f64);
    let ssim_mean = (!images.is_empty())
        .then(|| images.iter().map(|r| r.ssim).sum::<f64>() / images.len() as f64);

    let report = EvalReport {
        geometry,
        images,
        psnr_mean,
        ssim_mean,
    };

    // Aligned text table alongside the JSON.
    let mut table = String::new();
    table.push_str(&format!(
        "{:<12} {:>10} {:>10} {:>10} {:>12}\n",
        "metric", "P", "R", "F1", "CD"
    ));
    table.push_str(&format!(
        "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>12.6}\n",
        "geometry",
        report.geometry.precision,
        report.geometry.recall,
        report.geometry.f1,
        report.geometry.chamfer
    ));
    table.push_str(&format!(
        "# d_tau {} on {} pred / {} gt samples; chamfer = {}\n",
        report.geometry.d_tau,
        report.geometry.pred_samples,
        report.geometry.gt_samples,
        report.geometry.chamfer_convention
    ));
    if let (Some(p), Some(s)) = (report.psnr_mean, report.ssim_mean) {
        table.push_str(&format!(
            "{:<12} {:>10.3} {:>10.4}   (psnr/ssim over {} views)\n",
            "images",
            p,
            s,
            report.images.len()
        ));
    }
    eprint!("{table}");

    let json_path = out.join("eval_report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    std::fs::write(out.join("eval_report.txt"), table)?;
    manifest.add_output(&json_path)?;
    manifest.time("total_s", t0.elapsed().as_secs_f64());
    manifest.save(out.join("manifest.json"))?;
    Ok(())
}
