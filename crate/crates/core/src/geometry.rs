//! Planar deployment geometry: Poisson cluster process placement and random
//! waypoint mobility.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{stream_rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub min: Point,
    pub max: Point,
}

impl Area {
    pub fn new(min: Point, max: Point) -> Result<Self> {
        if !(max.x >= min.x && max.y >= min.y) || !min.x.is_finite() || !max.y.is_finite() {
            return Err(Error::domain(
                "area must have min <= max with finite corners",
            ));
        }
        Ok(Area { min, max })
    }

    /// Bounding box of `points` grown by `margin` on every side.
    pub fn spanning(points: impl IntoIterator<Item = Point>, margin: f64) -> Result<Self> {
        let mut it = points.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::domain("cannot span an empty point set"))?;
        let (mut min, mut max) = (first, first);
        for p in it {
            min.x = min.x.min(p.x);
            min.y = min.y.min(p.y);
            max.x = max.x.max(p.x);
            max.y = max.y.max(p.y);
        }
        Area::new(
            Point::new(min.x - margin, min.y - margin),
            Point::new(max.x + margin, max.y + margin),
        )
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn clamp(&self, p: Point) -> Point {
        Point::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
        )
    }

    pub fn center(&self) -> Point {
        Point::new(
            0.5 * (self.min.x + self.max.x),
            0.5 * (self.min.y + self.max.y),
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        Point::new(
            self.min.x + rng.random::<f64>() * self.width(),
            self.min.y + rng.random::<f64>() * self.height(),
        )
    }

    fn shrink(&self, by: f64) -> Area {
        Area {
            min: Point::new(self.min.x + by, self.min.y + by),
            max: Point::new(self.max.x - by, self.max.y - by),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Expert,
    Learner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gnb {
    pub id: usize,
    pub role: Role,
    pub position: Point,
    pub n_antennas: usize,
    pub max_power_dbm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ue {
    pub id: usize,
    pub position: Point,
    /// Group (expert or learner sub-network) whose cluster process placed
    /// this user.
    pub group: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub gnbs: Vec<Gnb>,
    pub ues: Vec<Ue>,
    pub area: Area,
    pub inter_gnb_distance: f64,
}

impl Topology {
    pub fn gnbs_with_role(&self, role: Role) -> impl Iterator<Item = &Gnb> {
        self.gnbs.iter().filter(move |g| g.role == role)
    }

    pub fn ues_in_group(&self, role: Role) -> impl Iterator<Item = &Ue> {
        self.ues.iter().filter(move |u| u.group == role)
    }

    /// Check the structural invariants: positions inside the area, unique
    /// ids, and no user whose two nearest gNBs belong to different roles.
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<usize> = self.gnbs.iter().map(|g| g.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::domain("duplicate gNB id"));
        }
        let mut ids: Vec<usize> = self.ues.iter().map(|u| u.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::domain("duplicate UE id"));
        }
        for g in &self.gnbs {
            if !self.area.contains(&g.position) {
                return Err(Error::domain(format!("gNB {} outside area", g.id)));
            }
        }
        for u in &self.ues {
            if !self.area.contains(&u.position) {
                return Err(Error::domain(format!("UE {} outside area", u.id)));
            }
            let mut by_dist: Vec<&Gnb> = self.gnbs.iter().collect();
            by_dist.sort_by(|a, b| {
                a.position
                    .distance(&u.position)
                    .total_cmp(&b.position.distance(&u.position))
            });
            if by_dist.len() >= 2 && by_dist[0].role != by_dist[1].role {
                return Err(Error::domain(format!(
                    "UE {} sits between expert and learner gNBs",
                    u.id
                )));
            }
        }
        Ok(())
    }
}

/// Users of one cluster process draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PcpDeployment {
    pub centers: Vec<Point>,
    pub users: Vec<Point>,
    /// Index into `centers` for every user.
    pub parents: Vec<usize>,
}

/// Poisson cluster process: `n_clusters` parents uniform in the area, each
/// with `users_per_cluster` users uniform on the disk of `radius`.
///
/// Parents are drawn in the area shrunk by `radius` so that no disk is
/// clipped by the area boundary.
pub fn deploy_pcp(
    n_clusters: usize,
    users_per_cluster: usize,
    radius: f64,
    area: &Area,
    seed: u64,
) -> Result<PcpDeployment> {
    let mut rng = stream_rng(seed, 0);
    deploy_pcp_with(n_clusters, users_per_cluster, radius, area, &mut rng)
}

pub fn deploy_pcp_with<R: Rng + ?Sized>(
    n_clusters: usize,
    users_per_cluster: usize,
    radius: f64,
    area: &Area,
    rng: &mut R,
) -> Result<PcpDeployment> {
    if !(radius > 0.0) {
        return Err(Error::config("cluster_radius_m", "must be positive"));
    }
    if radius > 0.5 * area.width().min(area.height()) {
        return Err(Error::config(
            "cluster_radius_m",
            format!(
                "radius {radius} m exceeds half the smaller area side ({} m); clusters would be clipped",
                0.5 * area.width().min(area.height())
            ),
        ));
    }
    let inner = area.shrink(radius);
    let mut centers = Vec::with_capacity(n_clusters);
    let mut users = Vec::with_capacity(n_clusters * users_per_cluster);
    let mut parents = Vec::with_capacity(n_clusters * users_per_cluster);
    for c in 0..n_clusters {
        let center = inner.sample(rng);
        centers.push(center);
        for _ in 0..users_per_cluster {
            users.push(uniform_on_disk(center, radius, rng));
            parents.push(c);
        }
    }
    Ok(PcpDeployment {
        centers,
        users,
        parents,
    })
}

fn uniform_on_disk<R: Rng + ?Sized>(center: Point, radius: f64, rng: &mut R) -> Point {
    let r = radius * rng.random::<f64>().sqrt();
    let phi = 2.0 * PI * rng.random::<f64>();
    Point::new(center.x + r * phi.cos(), center.y + r * phi.sin())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaypointParams {
    pub speed_min: f64,
    pub speed_max: f64,
    pub pause_min: f64,
    pub pause_max: f64,
}

impl Default for WaypointParams {
    fn default() -> Self {
        WaypointParams {
            speed_min: 1.0,
            speed_max: 3.0,
            pause_min: 0.0,
            pause_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Walker {
    pub position: Point,
    pub waypoint: Point,
    pub speed: f64,
    pub pause_remaining: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilityState {
    pub walkers: Vec<Walker>,
    pub area: Area,
    pub params: WaypointParams,
}

impl MobilityState {
    /// Start every walker at its position with a fresh waypoint and speed.
    pub fn new<R: Rng + ?Sized>(
        positions: &[Point],
        area: Area,
        params: WaypointParams,
        rng: &mut R,
    ) -> Self {
        let walkers = positions
            .iter()
            .map(|&position| Walker {
                position,
                waypoint: area.sample(rng),
                speed: draw_speed(&params, rng),
                pause_remaining: 0.0,
            })
            .collect();
        MobilityState {
            walkers,
            area,
            params,
        }
    }

    pub fn positions(&self) -> Vec<Point> {
        self.walkers.iter().map(|w| w.position).collect()
    }
}

fn draw_speed<R: Rng + ?Sized>(p: &WaypointParams, rng: &mut R) -> f64 {
    p.speed_min + rng.random::<f64>() * (p.speed_max - p.speed_min)
}

/// Advance every walker by `dt` seconds.
///
/// Walkers move straight toward their waypoint; on arrival they pause for a
/// uniform time and then head to a new uniform waypoint at a new speed.
/// A non-positive `dt` leaves the state unchanged.
pub fn step_random_waypoint<R: Rng + ?Sized>(
    state: &MobilityState,
    dt: f64,
    rng: &mut R,
) -> MobilityState {
    let mut next = state.clone();
    if !(dt > 0.0) {
        return next;
    }
    for w in &mut next.walkers {
        let mut remaining = dt;
        while remaining > 0.0 {
            if w.pause_remaining > 0.0 {
                let used = w.pause_remaining.min(remaining);
                w.pause_remaining -= used;
                remaining -= used;
                continue;
            }
            let dist = w.position.distance(&w.waypoint);
            let reach = w.speed * remaining;
            if reach < dist {
                let f = reach / dist;
                w.position = Point::new(
                    w.position.x + f * (w.waypoint.x - w.position.x),
                    w.position.y + f * (w.waypoint.y - w.position.y),
                );
                remaining = 0.0;
            } else {
                remaining -= dist / w.speed;
                w.position = w.waypoint;
                let p = &state.params;
                w.pause_remaining = p.pause_min + rng.random::<f64>() * (p.pause_max - p.pause_min);
                w.waypoint = state.area.sample(rng);
                w.speed = draw_speed(p, rng);
                // a zero-length pause followed by a coincident waypoint would spin
                if w.pause_remaining == 0.0 && w.position == w.waypoint {
                    break;
                }
            }
        }
        w.position = state.area.clamp(w.position);
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn box_area(w: f64, h: f64) -> Area {
        Area::new(Point::new(0.0, 0.0), Point::new(w, h)).unwrap()
    }

    #[test]
    fn zero_users_gives_empty_deployment() {
        let d = deploy_pcp(2, 0, 30.0, &box_area(200.0, 200.0), 1).unwrap();
        assert!(d.users.is_empty());
        assert_eq!(d.centers.len(), 2);
    }

    #[test]
    fn table_two_learner_clusters() {
        let area = box_area(210.0, 60.0);
        let d = deploy_pcp(2, 6, 30.0, &area, 7).unwrap();
        assert_eq!(d.users.len(), 12);
        for (u, &p) in d.users.iter().zip(&d.parents) {
            assert!(u.distance(&d.centers[p]) <= 30.0 + 1e-9);
            assert!(area.contains(u));
        }
    }

    #[test]
    fn oversized_radius_is_rejected() {
        let err = deploy_pcp(1, 1, 31.0, &box_area(210.0, 60.0), 0).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "cluster_radius_m"));
        assert!(deploy_pcp(1, 1, 0.0, &box_area(10.0, 10.0), 0).is_err());
    }

    #[test]
    fn centroid_converges_to_parent() {
        let area = box_area(100.0, 100.0);
        let d = deploy_pcp(1, 10_000, 30.0, &area, 3).unwrap();
        let n = d.users.len() as f64;
        let cx = d.users.iter().map(|p| p.x).sum::<f64>() / n;
        let cy = d.users.iter().map(|p| p.y).sum::<f64>() / n;
        assert!(Point::new(cx, cy).distance(&d.centers[0]) < 1.0);
    }

    #[test]
    fn disk_samples_pass_uniformity_chi_square() {
        // equal-area cells: 5 rings on r^2 times 8 angular sectors
        let area = box_area(100.0, 100.0);
        let d = deploy_pcp(1, 10_000, 30.0, &area, 11).unwrap();
        let c = d.centers[0];
        let (rings, sectors) = (5usize, 8usize);
        let mut counts = vec![0f64; rings * sectors];
        for u in &d.users {
            let (dx, dy) = (u.x - c.x, u.y - c.y);
            let r2 = (dx * dx + dy * dy) / (30.0 * 30.0);
            let ring = ((r2 * rings as f64) as usize).min(rings - 1);
            let ang = dy.atan2(dx).rem_euclid(2.0 * PI);
            let sec = ((ang / (2.0 * PI) * sectors as f64) as usize).min(sectors - 1);
            counts[ring * sectors + sec] += 1.0;
        }
        let expected = d.users.len() as f64 / counts.len() as f64;
        let stat: f64 = counts
            .iter()
            .map(|o| (o - expected).powi(2) / expected)
            .sum();
        let crit = ChiSquared::new((counts.len() - 1) as f64)
            .unwrap()
            .inverse_cdf(0.99);
        assert!(stat < crit, "chi2 {stat} >= {crit}");
    }

    #[test]
    fn same_seed_same_deployment() {
        let area = box_area(210.0, 60.0);
        assert_eq!(
            deploy_pcp(2, 6, 30.0, &area, 42).unwrap(),
            deploy_pcp(2, 6, 30.0, &area, 42).unwrap()
        );
        assert_ne!(
            deploy_pcp(2, 6, 30.0, &area, 42).unwrap().users,
            deploy_pcp(2, 6, 30.0, &area, 43).unwrap().users
        );
    }

    #[test]
    fn zero_step_is_identity() {
        let mut rng = stream_rng(1, 1);
        let s = MobilityState::new(
            &[Point::new(5.0, 5.0)],
            box_area(50.0, 50.0),
            WaypointParams::default(),
            &mut rng,
        );
        assert_eq!(step_random_waypoint(&s, 0.0, &mut rng), s);
    }

    #[test]
    fn linear_motion_toward_waypoint() {
        let mut rng = stream_rng(1, 1);
        let s = MobilityState {
            walkers: vec![Walker {
                position: Point::new(0.0, 0.0),
                waypoint: Point::new(10.0, 0.0),
                speed: 1.0,
                pause_remaining: 0.0,
            }],
            area: box_area(20.0, 20.0),
            params: WaypointParams::default(),
        };
        let n = step_random_waypoint(&s, 1.0, &mut rng);
        let w = &n.walkers[0];
        assert!((w.position.distance(&w.waypoint) - 9.0).abs() < 1e-12);
        assert!((w.position.x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn long_run_occupancy_is_center_biased() {
        let area = box_area(100.0, 100.0);
        let mut rng = stream_rng(5, 1);
        let mut s = MobilityState::new(
            &[Point::new(50.0, 50.0)],
            area,
            WaypointParams::default(),
            &mut rng,
        );
        // central square covers 25% of the area
        let mut inside = 0usize;
        let steps = 100_000;
        for _ in 0..steps {
            s = step_random_waypoint(&s, 1.0, &mut rng);
            let p = s.walkers[0].position;
            if (25.0..=75.0).contains(&p.x) && (25.0..=75.0).contains(&p.y) {
                inside += 1;
            }
        }
        let frac = inside as f64 / steps as f64;
        assert!(frac > 0.30, "central occupancy {frac}");
    }

    proptest! {
        #[test]
        fn walkers_never_leave_area(seed in 0u64..1000, dt in 0.0f64..5.0) {
            let area = box_area(80.0, 30.0);
            let mut rng = stream_rng(seed, 1);
            let start: Vec<Point> = (0..5).map(|_| area.sample(&mut rng)).collect();
            let mut s = MobilityState::new(&start, area, WaypointParams::default(), &mut rng);
            for _ in 0..50 {
                s = step_random_waypoint(&s, dt, &mut rng);
                for w in &s.walkers {
                    prop_assert!(area.contains(&w.position));
                    prop_assert!(area.contains(&w.waypoint));
                    prop_assert!(w.speed >= 1.0 && w.speed <= 3.0);
                }
            }
        }
    }
}
