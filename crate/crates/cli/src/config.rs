//! Run configuration: one TOML document covering all pipeline stages, with
//! defaults matching the reference protocol parameters.

use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default. Results do not depend on
    /// this value.
    pub threads: usize,
    /// Recorded in manifests; the pipeline is deterministic either way.
    pub deterministic: bool,
    pub simulate: SimulateConfig,
    pub fit: FitStageConfig,
    pub extract: ExtractConfig,
    pub texture: TextureConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            deterministic: true,
            simulate: SimulateConfig::default(),
            fit: FitStageConfig::default(),
            extract: ExtractConfig::default(),
            texture: TextureConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Scene side length, meters.
    pub scene_size: f64,
    pub boxes: usize,
    pub side_min: f64,
    pub side_max: f64,
    pub height_min: f64,
    pub height_max: f64,
    pub min_gap: f64,
    /// Sampling profile.
    pub roof_density: f64,
    pub ground_density: f64,
    pub facade_density: f64,
    pub sigma_z: f64,
    pub dropout: f64,
    /// Training capture: satellite-style near-nadir grid.
    pub altitude: f64,
    pub image_width: usize,
    pub image_height: usize,
    /// Ground sampling distance, m/px; the FOV is derived from it.
    pub gsd: f64,
    pub stride: f64,
    pub overlap: f64,
    /// Ground-truth point samples written for evaluation.
    pub gt_samples: usize,
    /// Atlas resolution used to paint ground-truth colors for view
    /// rendering.
    pub atlas_size: usize,
    /// Render the training views (slow at full resolution).
    pub render_views: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            scene_size: 1000.0,
            boxes: 20,
            side_min: 30.0,
            side_max: 80.0,
            height_min: 8.0,
            height_max: 18.0,
            min_gap: 8.0,
            roof_density: 1.0,
            ground_density: 1.0,
            facade_density: 0.0,
            sigma_z: 0.2,
            dropout: 0.0,
            altitude: 2000.0,
            image_width: 2560,
            image_height: 1440,
            gsd: 0.31,
            stride: 317.44,
            overlap: 0.6,
            gt_samples: 200_000,
            atlas_size: 1024,
            render_views: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FitStageConfig {
    pub grid_res: usize,
    pub sharpness: f64,
    pub lr: f64,
    pub steps: usize,
    pub lambda_lap: f64,
    pub lambda_nrm: f64,
    pub height_res: usize,
    /// Spatial divisions per side.
    pub tiles: usize,
    /// Tile overlap as a fraction of the tile span.
    pub overlap: f64,
    pub padding: f64,
}

impl Default for FitStageConfig {
    fn default() -> Self {
        FitStageConfig {
            grid_res: 256,
            sharpness: 80.0,
            lr: 0.01,
            steps: 2000,
            lambda_lap: 0.5,
            lambda_nrm: 0.01,
            height_res: 1024,
            tiles: 2,
            overlap: 0.1,
            padding: 0.02,
        }
    }
}

impl FitStageConfig {
    pub fn to_core(&self, seed: u64) -> zmono_core::fit::FitConfig {
        zmono_core::fit::FitConfig {
            lr: self.lr,
            steps: self.steps,
            lambda_lap: self.lambda_lap,
            lambda_nrm: self.lambda_nrm,
            grid_res: self.grid_res,
            height_res: self.height_res,
            sharpness: self.sharpness,
            padding: self.padding,
            seed,
            ..zmono_core::fit::FitConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    /// height | mc | naive128 | naive256
    pub method: String,
    /// Height-mesh vertices per tile axis.
    pub resolution: usize,
    /// Marching-cubes grid resolution for the `mc` method.
    pub mc_resolution: usize,
    /// Seam weld tolerance, world meters.
    pub weld_tol: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            method: "height".into(),
            resolution: 257,
            mc_resolution: 128,
            weld_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TextureConfig {
    pub atlas_size: usize,
    pub basic_epochs: usize,
    pub refine_iterations: usize,
    pub refine_epochs: usize,
    /// Novel-view grid for refinement.
    pub view_size: usize,
    pub grid_stride: f64,
    pub grid_margin: f64,
    pub altitude: f64,
    pub pitch_deg: f64,
    /// Loss weights carried from the reference protocol; the SSIM weight is
    /// configuration-only (SSIM is reported as a metric, not optimized).
    pub lambda_mse: f64,
    pub lambda_ssim: f64,
    /// "identity" or "command:<template with {in} and {out}>"
    pub hook: String,
    pub hook_timeout_s: u64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig {
            atlas_size: 2048,
            basic_epochs: 100,
            refine_iterations: 2,
            refine_epochs: 20,
            view_size: 2048,
            grid_stride: 150.0,
            grid_margin: 100.0,
            altitude: 450.0,
            pitch_deg: 45.0,
            lambda_mse: 0.8,
            lambda_ssim: 0.2,
            hook: "identity".into(),
            hook_timeout_s: 300,
        }
    }
}

impl TextureConfig {
    pub fn hook(&self) -> anyhow::Result<zmono_core::texture::EnhancerHook> {
        if self.hook == "identity" {
            Ok(zmono_core::texture::EnhancerHook::Identity)
        } else if let Some(template) = self.hook.strip_prefix("command:") {
            if !template.contains("{in}") || !template.contains("{out}") {
                anyhow::bail!("hook command template must contain {{in}} and {{out}}");
            }
            Ok(zmono_core::texture::EnhancerHook::ExternalCommand {
                template: template.to_string(),
                timeout: std::time::Duration::from_secs(self.hook_timeout_s),
            })
        } else {
            anyhow::bail!("hook must be 'identity' or 'command:<template>'");
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub d_tau: f64,
    pub samples: usize,
    /// Central crop fraction of the ground-truth xy bounding box used for
    /// geometry metrics (boundary regions are excluded, like the reference
    /// protocol's central-area evaluation).
    pub crop: f64,
    /// Extra tolerance below the ground-truth minimum z; points below are
    /// treated as closure artifacts (bottom plates) and cropped.
    pub z_floor_margin: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            d_tau: 0.036,
            samples: 200_000,
            crop: 0.8,
            z_floor_margin: 1.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.as_ref().display()))?;
        Ok(toml::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The defaults are the reference-protocol values; changing one should
    /// fail loudly here.
    #[test]
    fn defaults_match_reference_parameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.fit.grid_res, 256);
        assert_eq!(cfg.fit.sharpness, 80.0);
        assert_eq!(cfg.fit.lr, 0.01);
        assert_eq!(cfg.fit.steps, 2000);
        assert_eq!(cfg.fit.lambda_lap, 0.5);
        assert_eq!(cfg.fit.lambda_nrm, 0.01);
        assert_eq!(cfg.fit.height_res, 1024);
        assert_eq!(cfg.fit.tiles, 2);
        assert_eq!(cfg.extract.mc_resolution, 128);
        assert_eq!(cfg.eval.d_tau, 0.036);
        assert_eq!(cfg.texture.refine_iterations, 2);
        assert_eq!(cfg.texture.refine_epochs, 20);
        assert_eq!(cfg.texture.basic_epochs, 100);
        assert_eq!(cfg.texture.lambda_mse, 0.8);
        assert_eq!(cfg.texture.lambda_ssim, 0.2);
        assert_eq!(cfg.texture.grid_stride, 150.0);
        assert_eq!(cfg.texture.grid_margin, 100.0);
        assert_eq!(cfg.texture.altitude, 450.0);
        assert_eq!(cfg.texture.pitch_deg, 45.0);
        assert_eq!(cfg.texture.view_size, 2048);
        assert_eq!(cfg.simulate.altitude, 2000.0);
        assert_eq!(cfg.simulate.image_width, 2560);
        assert_eq!(cfg.simulate.image_height, 1440);
        assert_eq!(cfg.simulate.gsd, 0.31);
        assert_eq!(cfg.simulate.stride, 317.44);
        assert_eq!(cfg.simulate.overlap, 0.6);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: Result<RunConfig, _> = toml::from_str("unknown_key = 1");
        assert!(r.is_err());
    }

    #[test]
    fn hook_parsing() {
        let mut cfg = TextureConfig::default();
        assert!(matches!(
            cfg.hook().unwrap(),
            zmono_core::texture::EnhancerHook::Identity
        ));
        cfg.hook = "command:cp {in} {out}".into();
        assert!(matches!(
            cfg.hook().unwrap(),
            zmono_core::texture::EnhancerHook::ExternalCommand { .. }
        ));
        cfg.hook = "command:missing-placeholders".into();
        assert!(cfg.hook().is_err());
        cfg.hook = "garbage".into();
        assert!(cfg.hook().is_err());
    }
}
