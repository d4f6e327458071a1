//! Grouping of a gNB's users into beams.
//!
//! - [`kmeans_channel`]: k-medoids on channel correlation (learner gNBs).
//! - [`dbscan`]: density clustering on positions (BSDC).
//! - [`sectorize`]: fixed angular sectors (heuristic baseline).

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;

use crate::channel::{correlation, ChannelVector};
use crate::geometry::Point;
use crate::{Error, Result};

const MAX_ITERATIONS: usize = 100;

/// Beam label per user; `None` marks a DBSCAN noise point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub k: usize,
}

impl ClusterAssignment {
    /// Member indices of every cluster, in label order.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(l) = l {
                groups[*l].push(i);
            }
        }
        groups
    }

    pub fn noise(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.is_none().then_some(i))
            .collect()
    }
}

/// Cost trace of a k-medoids run, used to check monotone descent.
#[derive(Debug, Clone)]
pub struct KMedoidsTrace {
    pub assignment: ClusterAssignment,
    pub medoids: Vec<usize>,
    /// Total member-to-medoid dissimilarity after each assignment step.
    pub costs: Vec<f64>,
}

/// k-medoids over the dissimilarity `1 - correlation`.
///
/// Seeding is farthest-first: the first medoid comes from `rng`, each next
/// one is the user least correlated with the medoids chosen so far. The
/// medoid of a cluster is the member with the largest total in-cluster
/// correlation. Iterates until labels stop changing or 100 rounds.
pub fn kmeans_channel<R: Rng + ?Sized>(
    channels: &[ChannelVector],
    k: usize,
    rng: &mut R,
) -> Result<ClusterAssignment> {
    kmeans_channel_traced(channels, k, rng).map(|t| t.assignment)
}

pub fn kmeans_channel_traced<R: Rng + ?Sized>(
    channels: &[ChannelVector],
    k: usize,
    rng: &mut R,
) -> Result<KMedoidsTrace> {
    let n = channels.len();
    if k == 0 || k > n {
        return Err(Error::domain(format!(
            "k-medoids needs 1 <= k <= n (k={k}, n={n})"
        )));
    }
    let mut dis = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = correlation(&channels[i].coefficients, &channels[j].coefficients)?;
            dis[i * n + j] = 1.0 - c;
            dis[j * n + i] = 1.0 - c;
        }
    }
    let d = |i: usize, j: usize| dis[i * n + j];

    let mut medoids = vec![rng.random_range(0..n)];
    while medoids.len() < k {
        let next = (0..n)
            .filter(|i| !medoids.contains(i))
            .map(|i| {
                (
                    i,
                    medoids
                        .iter()
                        .map(|&m| d(i, m))
                        .fold(f64::INFINITY, f64::min),
                )
            })
            .fold(None::<(usize, f64)>, |best, (i, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((i, v)),
            })
            .map(|(i, _)| i)
            .expect("k <= n leaves a candidate");
        medoids.push(next);
    }

    let assign = |medoids: &[usize]| -> (Vec<usize>, f64) {
        let mut cost = 0.0;
        let labels = (0..n)
            .map(|i| {
                if let Some(own) = medoids.iter().position(|&m| m == i) {
                    return own;
                }
                let mut best = 0;
                for c in 1..medoids.len() {
                    if d(i, medoids[c]) < d(i, medoids[best]) {
                        best = c;
                    }
                }
                best
            })
            .collect::<Vec<_>>();
        for (i, &l) in labels.iter().enumerate() {
            cost += d(i, medoids[l]);
        }
        (labels, cost)
    };

    let (mut labels, cost) = assign(&medoids);
    let mut costs = vec![cost];
    for _ in 0..MAX_ITERATIONS {
        for (c, medoid) in medoids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            // smallest total dissimilarity == largest total correlation
            let mut best = *medoid;
            let mut best_cost: f64 = members.iter().map(|&j| d(best, j)).sum();
            for &cand in &members {
                let c_cost: f64 = members.iter().map(|&j| d(cand, j)).sum();
                if c_cost < best_cost - 1e-15 {
                    best = cand;
                    best_cost = c_cost;
                }
            }
            *medoid = best;
        }
        let (next, cost) = assign(&medoids);
        costs.push(cost);
        if next == labels {
            break;
        }
        labels = next;
    }

    Ok(KMedoidsTrace {
        assignment: ClusterAssignment {
            labels: labels.into_iter().map(Some).collect(),
            k,
        },
        medoids,
        costs,
    })
}

/// DBSCAN on planar positions. Neighborhoods are closed balls of radius
/// `eps` and include the point itself.
pub fn dbscan(positions: &[Point], eps: f64, minpts: usize) -> Result<ClusterAssignment> {
    if !(eps > 0.0) {
        return Err(Error::config("dbscan.eps_m", "must be positive"));
    }
    if minpts == 0 {
        return Err(Error::config("dbscan.minpts", "must be at least 1"));
    }
    let n = positions.len();
    let neighbors = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| positions[i].distance(&positions[j]) <= eps)
            .collect()
    };
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut k = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seeds = neighbors(i);
        if seeds.len() < minpts {
            continue;
        }
        labels[i] = Some(k);
        let mut queue: VecDeque<usize> = seeds.into();
        while let Some(j) = queue.pop_front() {
            if labels[j].is_none() {
                labels[j] = Some(k);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nj = neighbors(j);
            if nj.len() >= minpts {
                queue.extend(nj);
            }
        }
        k += 1;
    }
    Ok(ClusterAssignment { labels, k })
}

/// Azimuth sector of each user seen from `gnb_pos`, with sector `s`
/// covering `[s * 2pi/n, (s+1) * 2pi/n)`. A user on top of the gNB goes to
/// sector 0.
pub fn sectorize(
    positions: &[Point],
    gnb_pos: &Point,
    n_sectors: usize,
) -> Result<ClusterAssignment> {
    if n_sectors == 0 {
        return Err(Error::domain("need at least one sector"));
    }
    let width = 2.0 * PI / n_sectors as f64;
    let labels = positions
        .iter()
        .map(|p| {
            let (dx, dy) = (p.x - gnb_pos.x, p.y - gnb_pos.y);
            if dx == 0.0 && dy == 0.0 {
                return Some(0);
            }
            let az = dy.atan2(dx).rem_euclid(2.0 * PI);
            Some(((az / width) as usize).min(n_sectors - 1))
        })
        .collect();
    Ok(ClusterAssignment {
        labels,
        k: n_sectors,
    })
}
