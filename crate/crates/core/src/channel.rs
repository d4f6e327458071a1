//! Single-path LoS mm-Wave channel over a uniform linear array.
//!
//! A link's channel is `h = v(theta) * alpha / (sqrt(L) * (1 + d^eta))` where
//! `v` is the ULA steering vector toward the azimuth angle of departure and
//! `alpha` is a circularly-symmetric complex Gaussian gain.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::Point;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    /// Pathloss exponent.
    pub eta: f64,
    /// Unitless pathloss normalization.
    pub pathloss_l: f64,
    /// Variance of the complex gain.
    pub sigma_alpha_sq: f64,
    /// Antenna spacing over wavelength.
    pub spacing_ratio: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            eta: 2.0,
            pathloss_l: 1.0,
            sigma_alpha_sq: 1.0,
            spacing_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector {
    pub coefficients: Vec<Complex64>,
    pub ue: usize,
    pub gnb: usize,
}

impl ChannelVector {
    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coefficients)
    }

    pub fn scaled(&self, by: Complex64) -> ChannelVector {
        ChannelVector {
            coefficients: self.coefficients.iter().map(|c| c * by).collect(),
            ue: self.ue,
            gnb: self.gnb,
        }
    }
}

/// Unit-norm transmit weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingVector {
    pub weights: Vec<Complex64>,
}

impl BeamformingVector {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub(crate) fn norm(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// `a^H b`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Effective power gain `|h^H w|^2` of a channel through a beam.
pub fn beam_gain(h: &ChannelVector, w: &BeamformingVector) -> f64 {
    inner(&h.coefficients, &w.weights).norm_sqr()
}

pub fn steering_vector(theta: f64, m: usize, spacing_ratio: f64) -> Result<Vec<Complex64>> {
    if m == 0 {
        return Err(Error::domain("steering vector needs at least one antenna"));
    }
    let step = -2.0 * PI * spacing_ratio * theta.sin();
    Ok((0..m)
        .map(|n| Complex64::from_polar(1.0, step * n as f64))
        .collect())
}

/// Azimuth angle of departure from `gnb` toward `ue`, in `(-pi, pi]`.
pub fn angle_of_departure(gnb: &Point, ue: &Point) -> Result<f64> {
    let (dx, dy) = (ue.x - gnb.x, ue.y - gnb.y);
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::domain(
            "UE coincides with gNB; angle of departure undefined",
        ));
    }
    Ok(dy.atan2(dx))
}

/// Deterministic part of the channel (`alpha = 1`).
pub fn large_scale_channel(
    ue_pos: &Point,
    gnb_pos: &Point,
    m: usize,
    params: &ChannelParams,
    ids: (usize, usize),
) -> Result<ChannelVector> {
    let theta = angle_of_departure(gnb_pos, ue_pos)?;
    let d = gnb_pos.distance(ue_pos);
    let envelope = 1.0 / (params.pathloss_l.sqrt() * (1.0 + d.powf(params.eta)));
    let coefficients = steering_vector(theta, m, params.spacing_ratio)?
        .into_iter()
        .map(|c| c * envelope)
        .collect();
    Ok(ChannelVector {
        coefficients,
        ue: ids.0,
        gnb: ids.1,
    })
}

/// Draw `alpha ~ CN(0, sigma_alpha_sq)`.
pub fn draw_gain<R: Rng + ?Sized>(sigma_alpha_sq: f64, rng: &mut R) -> Complex64 {
    let s = (0.5 * sigma_alpha_sq).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

pub fn draw_channel<R: Rng + ?Sized>(
    ue_pos: &Point,
    gnb_pos: &Point,
    m: usize,
    params: &ChannelParams,
    ids: (usize, usize),
    rng: &mut R,
) -> Result<ChannelVector> {
    let ls = large_scale_channel(ue_pos, gnb_pos, m, params, ids)?;
    Ok(ls.scaled(draw_gain(params.sigma_alpha_sq, rng)))
}

/// Matched beam toward the mean steering direction of the cluster members.
///
/// Each member channel is rotated so its first coefficient is real and
/// positive, which strips the random gain phase and leaves the steering
/// direction. The normalized mean of those directions is the beam, so a
/// single member gets `w = h / |h|` up to a phase and `|h^H w| = |h|`.
pub fn beamforming_for_cluster(members: &[&ChannelVector]) -> Result<BeamformingVector> {
    let first = members
        .first()
        .ok_or_else(|| Error::domain("cannot form a beam for an empty cluster"))?;
    let m = first.len();
    let mut acc = vec![Complex64::new(0.0, 0.0); m];
    for h in members {
        if h.len() != m {
            return Err(Error::domain(
                "cluster members have mismatched antenna counts",
            ));
        }
        let direction = unit_direction(h)?;
        for (a, d) in acc.iter_mut().zip(direction) {
            *a += d;
        }
    }
    let n = norm(&acc);
    let weights = if n > 1e-12 {
        acc.into_iter().map(|c| c / n).collect()
    } else {
        // members cancel exactly; fall back to the first member
        unit_direction(first)?
    };
    Ok(BeamformingVector { weights })
}

fn unit_direction(h: &ChannelVector) -> Result<Vec<Complex64>> {
    let n = h.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::domain("channel with zero or non-finite norm"));
    }
    let c0 = h.coefficients[0];
    let derotate = if c0.norm() > 0.0 {
        c0.conj() / c0.norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    Ok(h.coefficients.iter().map(|c| c * derotate / n).collect())
}

/// Normalized correlation `|h1^H h2| / (|h1| |h2|)`, in `[0, 1]`.
pub fn channel_correlation(h1: &ChannelVector, h2: &ChannelVector) -> Result<f64> {
    correlation(&h1.coefficients, &h2.coefficients)
}

pub(crate) fn correlation(a: &[Complex64], b: &[Complex64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(
            "correlation of vectors with different lengths",
        ));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::domain("correlation with a zero-norm channel"));
    }
    Ok((inner(a, b).norm() / (na * nb)).min(1.0))
}
