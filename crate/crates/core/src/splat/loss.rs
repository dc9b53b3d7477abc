//! Photometric, structural and depth mapping loss.

use super::{MappingConfig, RenderOutput};
use crate::error::{Error, Result};
use crate::metrics::{ssim, ssim_with_grad};
use crate::raster::Image;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean absolute color error.
    pub photo: f64,
    /// `1 − SSIM`.
    pub ssim: f64,
    /// Mean absolute depth error over pixels with a valid observation.
    pub depth: f64,
}

/// Loss gradients with respect to the rendered images.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub color: Image,
    pub depth: Image,
}

fn check_inputs(rendered: &RenderOutput, rgb: &Image, depth: &Image, cfg: &MappingConfig) -> Result<()> {
    if rgb.channels != 3 || depth.channels != 1 {
        return Err(Error::invalid("observations must be a 3-channel color and a 1-channel depth image"));
    }
    rendered.color.ensure_same_shape(rgb)?;
    rendered.depth.ensure_same_shape(depth)?;
    let small = rgb.width < 11 || rgb.height < 11;
    if small && cfg.lambda_i > 0.0 {
        return Err(Error::invalid("structural term needs images of at least 11x11"));
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn mapping_loss(rendered: &RenderOutput, rgb: &Image, depth: &Image, cfg: &MappingConfig) -> Result<LossBreakdown> {
    evaluate(rendered, rgb, depth, cfg, false).map(|(l, _)| l)
}

pub fn mapping_loss_with_grad(
    rendered: &RenderOutput,
    rgb: &Image,
    depth: &Image,
    cfg: &MappingConfig,
) -> Result<(LossBreakdown, LossGrad)> {
    evaluate(rendered, rgb, depth, cfg, true).map(|(l, g)| (l, g.expect("gradient requested")))
}

fn evaluate(
    rendered: &RenderOutput,
    rgb: &Image,
    depth: &Image,
    cfg: &MappingConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<LossGrad>)> {
    check_inputs(rendered, rgb, depth, cfg)?;
    let n_color = rgb.data.len() as f64;
    let photo = rendered
        .color
        .data
        .iter()
        .zip(&rgb.data)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n_color;

    let valid: Vec<bool> = depth.data.iter().map(|d| d.is_finite() && *d > 0.0).collect();
    let n_valid = valid.iter().filter(|v| **v).count();
    let depth_err = if n_valid == 0 {
        0.0
    } else {
        rendered
            .depth
            .data
            .iter()
            .zip(&depth.data)
            .zip(&valid)
            .filter(|(_, v)| **v)
            .map(|((a, b), _)| (a - b).abs())
            .sum::<f64>()
            / n_valid as f64
    };

    let use_ssim = rgb.width >= 11 && rgb.height >= 11;
    let (ssim_value, ssim_grad) = match (use_ssim, want_grad && cfg.lambda_i > 0.0) {
        (false, _) => (1.0, None),
        (true, true) => {
            let (s, g) = ssim_with_grad(&rendered.color, rgb)?;
            (s, Some(g))
        }
        (true, false) => (ssim(&rendered.color, rgb)?, None),
    };

    let breakdown = LossBreakdown {
        total: (1.0 - cfg.lambda_i) * photo + cfg.lambda_i * (1.0 - ssim_value) + cfg.lambda_d * depth_err,
        photo,
        ssim: 1.0 - ssim_value,
        depth: depth_err,
    };
    if !want_grad {
        return Ok((breakdown, None));
    }

    let mut color = Image::new(rgb.width, rgb.height, 3);
    for (i, g) in color.data.iter_mut().enumerate() {
        *g = (1.0 - cfg.lambda_i) * sign(rendered.color.data[i] - rgb.data[i]) / n_color;
        if let Some(sg) = &ssim_grad {
            *g -= cfg.lambda_i * sg.data[i];
        }
    }
    let mut dgrad = Image::new(depth.width, depth.height, 1);
    if n_valid > 0 {
        for (i, g) in dgrad.data.iter_mut().enumerate() {
            if valid[i] {
                *g = cfg.lambda_d * sign(rendered.depth.data[i] - depth.data[i]) / n_valid as f64;
            }
        }
    }
    Ok((breakdown, Some(LossGrad { color, depth: dgrad })))
}
