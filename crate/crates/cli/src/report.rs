//! Run and evaluation reports.
//!
//! Reports echo the configuration and contain only values that depend on
//! the inputs, so two runs with different thread counts write identical bytes.

use std::fmt::Write as _;

use serde::Serialize;

use rstab_core::density::DensityModel;
use rstab_core::rayrange::{SplatMode, SpreadFloor};
use rstab_core::renderer::{StabilizeConfig, StabilizeReport};
use rstab_core::{Error, Result};

use crate::StabilizeArgs;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub head: String,
    pub window: usize,
    pub samples: usize,
    pub lambda: f64,
    pub literal_weights: bool,
    pub gamma: f64,
    pub smin: f64,
    pub eps_w: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_z: Option<f64>,
    pub no_arr: bool,
    pub no_cc: bool,
    pub blend_only: bool,
    pub smooth_window: usize,
    pub sigma_smooth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub frames: usize,
    pub cropping_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_psnr: Option<f64>,
    pub mean_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameLine {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    pub mean_weight: f64,
    pub min_weight: f64,
    pub valid_fraction: f64,
}

/// Report of one `stabilize` run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: ConfigEcho,
    pub summary: Summary,
    pub frame: Vec<FrameLine>,
}

impl RunReport {
    pub fn new(
        args: &StabilizeArgs,
        cfg: &StabilizeConfig,
        head: &DensityModel,
        seed: Option<u64>,
        r: &StabilizeReport,
    ) -> Self {
        let source = match (&args.input.data, args.input.preset) {
            // Directory names would make reports depend on where data lives.
            (Some(_), _) => "directory".to_string(),
            (None, Some(p)) => format!("preset:{}", rstab_core::Preset::from(p)),
            (None, None) => "unknown".to_string(),
        };
        let rc = &cfg.render;
        let smin = match rc.floor {
            SpreadFloor::Relative(f) | SpreadFloor::Absolute(f) => f,
        };
        let soft_z = match rc.splat {
            SplatMode::Average => None,
            SplatMode::SoftZ { beta } => Some(beta),
        };
        let frame: Vec<FrameLine> = r
            .frames
            .iter()
            .map(|f| FrameLine {
                index: f.timestamp,
                psnr: f.psnr,
                mean_weight: f.mean_weight,
                min_weight: f.min_weight,
                valid_fraction: f.valid_fraction,
            })
            .collect();
        let n = frame.len().max(1) as f64;
        RunReport {
            config: ConfigEcho {
                source,
                seed,
                head: head.name().to_string(),
                window: rc.window,
                samples: rc.samples,
                lambda: rc.lambda,
                literal_weights: rc.literal_weights,
                gamma: rc.gamma,
                smin,
                eps_w: rc.eps_w,
                soft_z,
                no_arr: rc.no_arr,
                no_cc: rc.no_cc,
                blend_only: rc.blend_only,
                smooth_window: cfg.smooth_window,
                sigma_smooth: cfg.smooth_sigma,
            },
            summary: Summary {
                frames: frame.len(),
                cropping_ratio: r.cropping_ratio,
                mean_psnr: r.mean_psnr,
                mean_weight: frame.iter().map(|f| f.mean_weight).sum::<f64>() / n,
            },
            frame,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize report: {e}")))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(s, "source        {}", c.source);
        let _ = writeln!(s, "head          {}", c.head);
        let _ = writeln!(
            s,
            "window        {} (L = {}, lambda = {})",
            c.window, c.samples, c.lambda
        );
        let mut modes = Vec::new();
        if c.no_arr {
            modes.push("no-arr");
        }
        if c.no_cc {
            modes.push("no-cc");
        }
        if c.blend_only {
            modes.push("blend-only");
        }
        let _ = writeln!(s, "ablation      {}", if modes.is_empty() { "none".into() } else { modes.join(", ") });
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>6} {:>9} {:>11} {:>11} {:>9}", "frame", "psnr", "mean W", "min W", "valid");
        for f in &self.frame {
            let _ = writeln!(
                s,
                "{:>6} {:>9} {:>11.6} {:>11.6} {:>9.5}",
                f.index,
                f.psnr.map_or("-".into(), |p| format!("{p:.3}")),
                f.mean_weight,
                f.min_weight,
                f.valid_fraction
            );
        }
        let _ = writeln!(s);
        let m = &self.summary;
        let _ = writeln!(s, "cropping ratio  {:.6}", m.cropping_ratio);
        if let Some(p) = m.mean_psnr {
            let _ = writeln!(s, "mean PSNR       {p:.3} dB");
        }
        let _ = writeln!(s, "mean weight     {:.6}", m.mean_weight);
        s
    }
}

/// Metrics of an output directory against its input clip.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub frames: usize,
    pub cropping_ratio: f64,
    pub distortion: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stability_input: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stability_output: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_psnr: Option<f64>,
}

impl EvalReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize report: {e}")))
    }

    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "frames            {}", self.frames);
        let _ = writeln!(s, "cropping ratio    {:.4}", self.cropping_ratio);
        let _ = writeln!(s, "distortion        {:.4}", self.distortion);
        let _ = writeln!(s, "stability (in)    {}", opt(self.stability_input));
        let _ = writeln!(s, "stability (out)   {}", opt(self.stability_output));
        if let Some(p) = self.mean_psnr {
            let _ = writeln!(s, "mean PSNR         {p:.3} dB");
        }
        s
    }
}
