//! NOMA power allocation, SIC ordering and the SINR decomposition for
//! learner beams (intra-beam `I1`, inter-beam `I2`) and expert cells.

use crate::channel::{beam_gain, BeamformingVector, ChannelVector};
use crate::geometry::Role;
use crate::{Error, Result};

/// FTPA decay exponent.
pub const FTPA_DECAY: f64 = 1.0;

/// One transmit beam of a gNB with its NOMA superposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    /// Index of the transmitting gNB in the channel realization.
    pub gnb: usize,
    pub role: Role,
    /// UE indices covered by the beam.
    pub members: Vec<usize>,
    pub weights: BeamformingVector,
    pub power_w: f64,
    /// NOMA factor of each member, aligned with `members`.
    pub factors: Vec<f64>,
    /// SIC decoding order of each member, aligned with `members`.
    pub order: Vec<usize>,
}

impl Beam {
    fn member_slot(&self, ue: usize) -> Option<usize> {
        self.members.iter().position(|&u| u == ue)
    }
}

/// All beams active in one TTI plus the serving beam of every UE.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BeamPlan {
    pub beams: Vec<Beam>,
    /// Serving beam index per UE, `None` if unserved.
    pub serving: Vec<Option<usize>>,
}

impl BeamPlan {
    pub fn from_beams(beams: Vec<Beam>, n_ues: usize) -> Result<Self> {
        let mut serving = vec![None; n_ues];
        for (b, beam) in beams.iter().enumerate() {
            for &u in &beam.members {
                if u >= n_ues {
                    return Err(Error::domain(format!("beam member {u} out of range")));
                }
                if serving[u].replace(b).is_some() {
                    return Err(Error::domain(format!("UE {u} is covered by two beams")));
                }
            }
        }
        let plan = BeamPlan { beams, serving };
        plan.validate()?;
        Ok(plan)
    }

    pub fn beams_of(&self, gnb: usize) -> impl Iterator<Item = (usize, &Beam)> {
        self.beams
            .iter()
            .enumerate()
            .filter(move |(_, b)| b.gnb == gnb)
    }

    /// Check factor sums and that every SIC order is a permutation.
    pub fn validate(&self) -> Result<()> {
        for beam in &self.beams {
            let n = beam.members.len();
            if n == 0 || beam.factors.len() != n || beam.order.len() != n {
                return Err(Error::domain("beam with inconsistent member data"));
            }
            let sum: f64 = beam.factors.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::domain(format!("NOMA factors sum to {sum}")));
            }
            let mut seen = vec![false; n];
            for &o in &beam.order {
                if o >= n || std::mem::replace(&mut seen[o], true) {
                    return Err(Error::domain("SIC order is not a permutation"));
                }
            }
        }
        Ok(())
    }

    pub fn total_power(&self, gnb: usize) -> f64 {
        self.beams_of(gnb).map(|(_, b)| b.power_w).sum()
    }
}

/// Channels of one TTI, indexed `[gnb][ue]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub links: Vec<Vec<ChannelVector>>,
}

impl ChannelRealization {
    pub fn link(&self, gnb: usize, ue: usize) -> &ChannelVector {
        &self.links[gnb][ue]
    }

    pub fn n_ues(&self) -> usize {
        self.links.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinrReport {
    pub sinr: f64,
    pub sinr_db: f64,
    pub signal: f64,
    pub i1: f64,
    pub i2: f64,
    pub noise: f64,
}

impl SinrReport {
    fn new(signal: f64, i1: f64, i2: f64, noise: f64) -> Self {
        let sinr = signal / (i1 + i2 + noise);
        SinrReport {
            sinr,
            sinr_db: 10.0 * sinr.log10(),
            signal,
            i1,
            i2,
            noise,
        }
    }
}

/// Fractional transmit power allocation: `beta_u ~ g_u^-1`, normalized.
pub fn noma_power_factors(effective_gains: &[f64]) -> Result<Vec<f64>> {
    if effective_gains
        .iter()
        .any(|&g| !(g > 0.0) || !g.is_finite())
    {
        return Err(Error::domain(
            "NOMA power factors need strictly positive gains",
        ));
    }
    let weights: Vec<f64> = effective_gains
        .iter()
        .map(|g| g.powf(-FTPA_DECAY))
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// SIC decoding order: the weakest user gets order 0, ties go to the lower
/// UE id. A user is interfered only by members with a higher order.
pub fn sic_order(effective_gains: &[f64], ue_ids: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..effective_gains.len()).collect();
    idx.sort_by(|&a, &b| {
        effective_gains[a]
            .total_cmp(&effective_gains[b])
            .then(ue_ids[a].cmp(&ue_ids[b]))
    });
    let mut order = vec![0; idx.len()];
    for (rank, i) in idx.into_iter().enumerate() {
        order[i] = rank;
    }
    order
}

fn intra_beam(beam: &Beam, slot: usize, gain: f64) -> (f64, f64) {
    let own = beam.order[slot];
    let residual: f64 = (0..beam.members.len())
        .filter(|&i| i != slot && beam.order[i] > own)
        .map(|i| beam.factors[i])
        .sum();
    (
        beam.power_w * beam.factors[slot] * gain,
        beam.power_w * gain * residual,
    )
}

fn locate(ue: usize, beam_idx: usize, plan: &BeamPlan) -> Result<(&Beam, usize)> {
    let beam = plan
        .beams
        .get(beam_idx)
        .ok_or_else(|| Error::domain(format!("no beam {beam_idx}")))?;
    let slot = beam
        .member_slot(ue)
        .ok_or_else(|| Error::domain(format!("UE {ue} is not a member of beam {beam_idx}")))?;
    Ok((beam, slot))
}

/// SINR of `ue` on learner beam `beam_idx`.
///
/// `I2` sums every other learner beam, including other beams of the same
/// gNB, each seen through the channel from its own gNB.
pub fn sinr_learner(
    ue: usize,
    beam_idx: usize,
    plan: &BeamPlan,
    channels: &ChannelRealization,
    noise_w: f64,
) -> Result<SinrReport> {
    let (beam, slot) = locate(ue, beam_idx, plan)?;
    let gain = beam_gain(channels.link(beam.gnb, ue), &beam.weights);
    let (signal, i1) = intra_beam(beam, slot, gain);
    let i2 = plan
        .beams
        .iter()
        .enumerate()
        .filter(|(m, b)| *m != beam_idx && b.role == Role::Learner)
        .map(|(_, b)| b.power_w * beam_gain(channels.link(b.gnb, ue), &b.weights))
        .sum();
    Ok(SinrReport::new(signal, i1, i2, noise_w))
}

/// SINR of `ue` served by the single beam of expert gNB `expert_gnb`.
///
/// Interference comes from the other expert gNBs through their beams; the
/// serving beam also carries NOMA residual interference as on learner
/// beams.
pub fn sinr_expert(
    ue: usize,
    expert_gnb: usize,
    plan: &BeamPlan,
    channels: &ChannelRealization,
    noise_w: f64,
) -> Result<SinrReport> {
    let beam_idx = plan
        .serving
        .get(ue)
        .copied()
        .flatten()
        .filter(|&b| plan.beams[b].gnb == expert_gnb && plan.beams[b].role == Role::Expert)
        .ok_or_else(|| {
            Error::domain(format!("UE {ue} is not served by expert gNB {expert_gnb}"))
        })?;
    let (beam, slot) = locate(ue, beam_idx, plan)?;
    let gain = beam_gain(channels.link(expert_gnb, ue), &beam.weights);
    let (signal, i1) = intra_beam(beam, slot, gain);
    let i2 = plan
        .beams
        .iter()
        .filter(|b| b.gnb != expert_gnb && b.role == Role::Expert)
        .map(|b| b.power_w * beam_gain(channels.link(b.gnb, ue), &b.weights))
        .sum();
    Ok(SinrReport::new(signal, i1, i2, noise_w))
}

/// SINR of `ue` on whatever beam serves it.
pub fn sinr_of(
    ue: usize,
    plan: &BeamPlan,
    channels: &ChannelRealization,
    noise_w: f64,
) -> Result<SinrReport> {
    let b = plan
        .serving
        .get(ue)
        .copied()
        .flatten()
        .ok_or_else(|| Error::domain(format!("UE {ue} is unserved")))?;
    match plan.beams[b].role {
        Role::Learner => sinr_learner(ue, b, plan, channels, noise_w),
        Role::Expert => sinr_expert(ue, plan.beams[b].gnb, plan, channels, noise_w),
    }
}

/// Shannon sum rate in bits/s.
pub fn sum_rate(sinrs: &[f64], bandwidth_hz: f64) -> f64 {
    sinrs.iter().map(|g| bandwidth_hz * (1.0 + g).log2()).sum()
}
