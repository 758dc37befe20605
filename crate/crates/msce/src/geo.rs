//! Spherical geometry, transect construction, and registration of track or
//! grid observations onto the transect.

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeRange(f64),
    #[error("direction {0} outside (0, 360]")]
    DirectionRange(f64),
    #[error("transect needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("transect endpoints are degenerate ({0}); pick distinct, non-antipodal points")]
    DegenerateEndpoints(&'static str),
    #[error("transect distances are not strictly increasing at index {0}")]
    NotIncreasing(usize),
    #[error("transect spacing varies by more than 1% at segment {0}")]
    UnevenSpacing(usize),
    #[error("max matching distance must be positive, got {0}")]
    BadMaxDist(f64),
    #[error("quantity count mismatch: {names} names vs {tracks} track sets")]
    QuantityMismatch { names: usize, tracks: usize },
    #[error("no passes survived registration (rejected {rejected}, incomplete {incomplete})")]
    NothingRegistered { rejected: usize, incomplete: usize },
}

/// A point on the sphere. Longitude is normalized into (-180, 180] at
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat_deg) || !lat_deg.is_finite() {
            return Err(GeoError::LatitudeRange(lat_deg));
        }
        let mut lon = lon_deg % 360.0;
        if lon <= -180.0 {
            lon += 360.0;
        } else if lon > 180.0 {
            lon -= 360.0;
        }
        Ok(Self { lat_deg, lon_deg: lon })
    }

    fn to_unit_vec(self) -> [f64; 3] {
        let lat = self.lat_deg.to_radians();
        let lon = self.lon_deg.to_radians();
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    }

    fn from_unit_vec(v: [f64; 3]) -> Self {
        let lat = v[2].clamp(-1.0, 1.0).asin().to_degrees();
        let lon = v[1].atan2(v[0]).to_degrees();
        GeoPoint::new(lat, lon).expect("unit vector maps to valid coordinates")
    }
}

/// Great-circle distance in km by the spherical law of cosines, with the
/// arccos argument clamped to [-1, 1] so coincident and antipodal points
/// round cleanly.
pub fn great_circle_distance(a: GeoPoint, b: GeoPoint) -> f64 {
    let (pa, pb) = (a.lat_deg.to_radians(), b.lat_deg.to_radians());
    let dl = (b.lon_deg - a.lon_deg).to_radians();
    let c = (pa.sin() * pb.sin() + pa.cos() * pb.cos() * dl.cos()).clamp(-1.0, 1.0);
    EARTH_RADIUS_KM * c.acos()
}

/// Ordered registration locations r_0..r_p with distances from r_0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transect {
    points: Vec<GeoPoint>,
    distances_km: Vec<f64>,
}

impl Transect {
    /// Builds a transect from an ordered point list, checking that the
    /// spacing is uniform within 1% relative tolerance.
    pub fn new(points: Vec<GeoPoint>) -> Result<Self, GeoError> {
        if points.len() < 2 {
            return Err(GeoError::TooFewPoints(points.len()));
        }
        let distances_km: Vec<f64> =
            points.iter().map(|p| great_circle_distance(points[0], *p)).collect();
        for i in 1..distances_km.len() {
            if distances_km[i] <= distances_km[i - 1] {
                return Err(GeoError::NotIncreasing(i));
            }
        }
        let spacing0 = distances_km[1];
        for i in 1..distances_km.len() - 1 {
            let spacing = distances_km[i + 1] - distances_km[i];
            if (spacing - spacing0).abs() > 0.01 * spacing0 {
                return Err(GeoError::UnevenSpacing(i + 1));
            }
        }
        Ok(Self { points, distances_km })
    }

    /// `n_points` equally-spaced locations along the great circle from
    /// `start` to `end` (spherical linear interpolation on the minor arc).
    pub fn build(start: GeoPoint, end: GeoPoint, n_points: usize) -> Result<Self, GeoError> {
        if n_points < 2 {
            return Err(GeoError::TooFewPoints(n_points));
        }
        let a = start.to_unit_vec();
        let b = end.to_unit_vec();
        let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
        let omega = dot.acos();
        if omega < 1e-9 {
            return Err(GeoError::DegenerateEndpoints("coincident"));
        }
        if std::f64::consts::PI - omega < 1e-9 {
            return Err(GeoError::DegenerateEndpoints("antipodal"));
        }
        let sin_omega = omega.sin();
        let points = (0..n_points)
            .map(|i| {
                let t = i as f64 / (n_points - 1) as f64;
                let (ca, cb) = (((1.0 - t) * omega).sin() / sin_omega, (t * omega).sin() / sin_omega);
                GeoPoint::from_unit_vec([
                    ca * a[0] + cb * b[0],
                    ca * a[1] + cb * b[1],
                    ca * a[2] + cb * b[2],
                ])
            })
            .collect();
        Self::new(points)
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.points
    }

    pub fn distances_km(&self) -> &[f64] {
        &self.distances_km
    }

    /// Number of locations (p + 1 including r_0).
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // at least two points by construction
    }

    /// Number of remote locations p.
    pub fn n_remote(&self) -> usize {
        self.points.len() - 1
    }
}

/// One swath/grid sample: a timestamped observation of a quantity with its
/// direction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackObservation {
    pub time: DateTime<Utc>,
    pub location: GeoPoint,
    pub value: f64,
    pub direction_deg: f64,
}

impl TrackObservation {
    pub fn new(
        time: DateTime<Utc>,
        location: GeoPoint,
        value: f64,
        direction_deg: f64,
    ) -> Result<Self, GeoError> {
        if !(direction_deg > 0.0 && direction_deg <= 360.0) {
            return Err(GeoError::DirectionRange(direction_deg));
        }
        Ok(Self { time, location, value, direction_deg })
    }
}

/// Observations sharing one track identifier.
#[derive(Debug, Clone)]
pub struct Pass {
    pub id: String,
    pub observations: Vec<TrackObservation>,
}

/// Day of the year mapped linearly onto (0, 360].
pub fn season_deg(time: DateTime<Utc>) -> f64 {
    let days_in_year = if time.date_naive().leap_year() { 366.0 } else { 365.0 };
    360.0 * f64::from(time.ordinal()) / days_in_year
}

/// One registered event: every (location, quantity) pair carries a value
/// and a direction. Index layout is `k * (p + 1) + j` for quantity k and
/// location j.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisteredEvent {
    pub time: DateTime<Utc>,
    pub season_deg: f64,
    pub values: Vec<f64>,
    pub directions: Vec<f64>,
}

/// Complete registered sample: per-event values for m quantities at p + 1
/// transect locations.
#[derive(Debug, Clone)]
pub struct RegisteredDataset {
    pub quantities: Vec<String>,
    pub transect: Transect,
    pub events: Vec<RegisteredEvent>,
}

impl RegisteredDataset {
    pub fn n_locations(&self) -> usize {
        self.transect.len()
    }

    pub fn value(&self, event: usize, quantity: usize, location: usize) -> f64 {
        self.events[event].values[quantity * self.n_locations() + location]
    }

    pub fn direction(&self, event: usize, quantity: usize, location: usize) -> f64 {
        self.events[event].directions[quantity * self.n_locations() + location]
    }

    /// All (value, direction, season) triples for one (quantity, location)
    /// column, in event order.
    pub fn column(&self, quantity: usize, location: usize) -> Vec<(f64, f64, f64)> {
        let idx = quantity * self.n_locations() + location;
        self.events
            .iter()
            .map(|e| (e.values[idx], e.directions[idx], e.season_deg))
            .collect()
    }
}

/// Counters from one registration run. `accepted + rejected_passes +
/// dropped_incomplete + empty_passes` equals the number of input passes of
/// the conditioning quantity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationStats {
    pub accepted: usize,
    pub rejected_passes: usize,
    pub dropped_incomplete: usize,
    pub empty_passes: usize,
}

struct Match {
    value: f64,
    direction: f64,
    dist_km: f64,
}

/// Nearest observation to each registration location; `None` when the pool
/// is empty.
fn match_locations(obs: &[&TrackObservation], transect: &Transect) -> Option<Vec<Match>> {
    if obs.is_empty() {
        return None;
    }
    Some(
        transect
            .points()
            .iter()
            .map(|r| {
                let mut best: Option<Match> = None;
                for o in obs {
                    let d = great_circle_distance(o.location, *r);
                    if best.as_ref().is_none_or(|b| d < b.dist_km) {
                        best = Some(Match { value: o.value, direction: o.direction_deg, dist_km: d });
                    }
                }
                best.expect("non-empty pool")
            })
            .collect(),
    )
}

/// Registers passes of the conditioning quantity onto the transect and
/// matches the remaining quantities spatially at the accepted event times.
///
/// A pass is rejected outright when the largest matched distance over the
/// registration locations exceeds `max_dist_km`. Events missing any
/// (location, quantity) value within `max_dist_km` — including events with
/// no observation of some quantity inside the `pass_window_hours` time
/// window — are dropped as incomplete. Output events are sorted by time.
///
/// `tracks[0]` must hold the conditioning quantity's passes; `tracks[k]`
/// for k > 0 are pooled observation sets for the other quantities.
pub fn register_events(
    quantities: &[String],
    tracks: &[Vec<Pass>],
    transect: &Transect,
    max_dist_km: f64,
    pass_window_hours: f64,
) -> Result<(RegisteredDataset, RegistrationStats), GeoError> {
    if max_dist_km <= 0.0 {
        return Err(GeoError::BadMaxDist(max_dist_km));
    }
    if quantities.len() != tracks.len() || tracks.is_empty() {
        return Err(GeoError::QuantityMismatch { names: quantities.len(), tracks: tracks.len() });
    }
    let mut stats = RegistrationStats::default();
    let window = chrono::Duration::seconds((pass_window_hours * 3600.0 / 2.0).round() as i64);

    // flatten the non-conditioning pools once, sorted by time for the window scan
    let pools: Vec<Vec<&TrackObservation>> = tracks[1..]
        .iter()
        .map(|passes| {
            let mut v: Vec<&TrackObservation> =
                passes.iter().flat_map(|p| p.observations.iter()).collect();
            v.sort_by_key(|o| o.time);
            v
        })
        .collect();

    // passes are independent; match them in parallel, then fold counters in order
    let per_pass: Vec<Option<RegisteredEvent>> = exec::map_slice(&tracks[0], |pass| {
        let obs: Vec<&TrackObservation> = pass.observations.iter().collect();
        let matches = match_locations(&obs, transect)?;
        let max_d = matches.iter().map(|m| m.dist_km).fold(0.0, f64::max);
        if max_d > max_dist_km {
            return None;
        }
        // pass time = median observation time
        let mut times: Vec<DateTime<Utc>> = pass.observations.iter().map(|o| o.time).collect();
        times.sort();
        let time = times[times.len() / 2];

        let n_loc = transect.len();
        let mut values = vec![0.0; quantities.len() * n_loc];
        let mut directions = vec![0.0; quantities.len() * n_loc];
        for (j, m) in matches.iter().enumerate() {
            values[j] = m.value;
            directions[j] = m.direction;
        }
        for (k, pool) in pools.iter().enumerate() {
            let lo = pool.partition_point(|o| o.time < time - window);
            let hi = pool.partition_point(|o| o.time <= time + window);
            let in_window = &pool[lo..hi];
            let matches = match_locations(in_window, transect)?;
            if matches.iter().any(|m| m.dist_km > max_dist_km) {
                return None;
            }
            for (j, m) in matches.iter().enumerate() {
                values[(k + 1) * n_loc + j] = m.value;
                directions[(k + 1) * n_loc + j] = m.direction;
            }
        }
        Some(RegisteredEvent { time, season_deg: season_deg(time), values, directions })
    });

    let mut events = Vec::new();
    for (pass, event) in tracks[0].iter().zip(per_pass) {
        if pass.observations.is_empty() {
            stats.empty_passes += 1;
            continue;
        }
        match event {
            Some(e) => {
                stats.accepted += 1;
                events.push((pass.id.clone(), e));
            }
            None => {
                // distinguish pass rejection from incomplete-event drop for the counters
                let obs: Vec<&TrackObservation> = pass.observations.iter().collect();
                let rejected = match_locations(&obs, transect)
                    .map(|ms| ms.iter().any(|m| m.dist_km > max_dist_km))
                    .unwrap_or(true);
                if rejected {
                    stats.rejected_passes += 1;
                } else {
                    stats.dropped_incomplete += 1;
                }
            }
        }
    }
    if stats.empty_passes > 0 {
        log::warn!("registration: skipped {} empty passes", stats.empty_passes);
    }
    if stats.rejected_passes > 0 {
        log::info!(
            "registration: rejected {} passes beyond {} km",
            stats.rejected_passes,
            max_dist_km
        );
    }
    if stats.dropped_incomplete > 0 {
        log::info!("registration: dropped {} incomplete events", stats.dropped_incomplete);
    }
    if events.is_empty() {
        return Err(GeoError::NothingRegistered {
            rejected: stats.rejected_passes,
            incomplete: stats.dropped_incomplete,
        });
    }
    events.sort_by(|(ia, a), (ib, b)| a.time.cmp(&b.time).then_with(|| ia.cmp(ib)));
    let dataset = RegisteredDataset {
        quantities: quantities.to_vec(),
        transect: transect.clone(),
        events: events.into_iter().map(|(_, e)| e).collect(),
    };
    Ok((dataset, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use chrono::TimeZone;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn distance_coincident_is_zero() {
        assert_eq!(great_circle_distance(pt(55.0, -22.0), pt(55.0, -22.0)), 0.0);
    }

    #[test]
    fn distance_antipodal_is_half_circumference() {
        let d = great_circle_distance(pt(0.0, 0.0), pt(0.0, 180.0));
        assert_relative_eq!(d, std::f64::consts::PI * EARTH_RADIUS_KM, epsilon = 1e-9);
    }

    #[test]
    fn distance_one_degree_on_equator() {
        // hand evaluation of the spherical law: R * pi / 180
        let d = great_circle_distance(pt(0.0, 0.0), pt(0.0, 1.0));
        assert_relative_eq!(d, EARTH_RADIUS_KM * std::f64::consts::PI / 180.0, epsilon = 1e-9);
        assert_relative_eq!(d, 111.194_926_644_558_74, epsilon = 1e-6);
    }

    #[test]
    fn distance_symmetric() {
        let (a, b) = (pt(67.0, -2.0), pt(55.0, -22.0));
        assert_eq!(great_circle_distance(a, b), great_circle_distance(b, a));
    }

    #[test]
    fn longitude_normalization() {
        assert_eq!(pt(0.0, 181.0).lon_deg, -179.0);
        assert_eq!(pt(0.0, -180.0).lon_deg, 180.0);
        assert_eq!(pt(0.0, 540.0).lon_deg, 180.0);
        assert!(GeoPoint::new(91.0, 0.0).is_err());
    }

    #[test]
    fn transect_two_points_is_endpoints() {
        let t = Transect::build(pt(0.0, 0.0), pt(0.0, 10.0), 2).unwrap();
        assert_eq!(t.points()[0], pt(0.0, 0.0));
        assert_relative_eq!(t.points()[1].lon_deg, 10.0, epsilon = 1e-9);
        assert_eq!(t.distances_km()[0], 0.0);
    }

    #[test]
    fn transect_midpoint_on_equator() {
        let t = Transect::build(pt(0.0, 0.0), pt(0.0, 10.0), 3).unwrap();
        assert_relative_eq!(t.points()[1].lat_deg, 0.0, epsilon = 1e-9);
        assert_relative_eq!(t.points()[1].lon_deg, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn transect_paper_endpoints_even_spacing() {
        // 14 locations between ~2W 67N and ~22W 55N
        let t = Transect::build(pt(67.0, -2.0), pt(55.0, -22.0), 14).unwrap();
        assert_eq!(t.len(), 14);
        let total = *t.distances_km().last().unwrap();
        let nominal = total / 13.0;
        for w in t.distances_km().windows(2) {
            assert_relative_eq!(w[1] - w[0], nominal, max_relative = 1e-6);
        }
        // independent check of one interior point against scalar slerp on the
        // angle between endpoints
        let a = pt(67.0, -2.0).to_unit_vec();
        let b = pt(55.0, -22.0).to_unit_vec();
        let omega = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).acos();
        let frac = t.distances_km()[5] / total;
        assert_relative_eq!(
            great_circle_distance(pt(67.0, -2.0), t.points()[5]),
            EARTH_RADIUS_KM * omega * frac,
            max_relative = 1e-9
        );
    }

    #[test]
    fn transect_degenerate_endpoints_rejected() {
        assert!(Transect::build(pt(10.0, 10.0), pt(10.0, 10.0), 5).is_err());
        assert!(Transect::build(pt(0.0, 0.0), pt(0.0, 180.0), 5).is_err());
        assert!(Transect::build(pt(0.0, 0.0), pt(0.0, 10.0), 1).is_err());
    }

    #[test]
    fn pairwise_distance_equals_difference_along_transect() {
        let t = Transect::build(pt(67.0, -2.0), pt(55.0, -22.0), 14).unwrap();
        for j in 0..t.len() {
            for j2 in j..t.len() {
                let direct = great_circle_distance(t.points()[j], t.points()[j2]);
                let diff = (t.distances_km()[j2] - t.distances_km()[j]).abs();
                // the law of cosines resolves angles only to ~1e-8 rad, so
                // allow a metre of slack for coincident points
                assert_relative_eq!(direct, diff, max_relative = 1e-9, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn season_mapping() {
        let jan1 = Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).unwrap();
        assert_relative_eq!(season_deg(jan1), 360.0 / 365.0, epsilon = 1e-12);
        let dec31 = Utc.with_ymd_and_hms(2015, 12, 31, 12, 0, 0).unwrap();
        assert_relative_eq!(season_deg(dec31), 360.0, epsilon = 1e-12);
        let leap = Utc.with_ymd_and_hms(2016, 12, 31, 0, 0, 0).unwrap();
        assert_relative_eq!(season_deg(leap), 360.0, epsilon = 1e-12);
    }

    fn obs(time: DateTime<Utc>, p: GeoPoint, value: f64) -> TrackObservation {
        TrackObservation::new(time, p, value, 90.0).unwrap()
    }

    fn small_transect() -> Transect {
        Transect::build(pt(0.0, 0.0), pt(0.0, 2.0), 3).unwrap()
    }

    #[test]
    fn exact_hits_register_with_zero_distance() {
        let t = small_transect();
        let time = Utc.with_ymd_and_hms(2015, 6, 1, 12, 0, 0).unwrap();
        let pass = Pass {
            id: "p1".into(),
            observations: t.points().iter().map(|p| obs(time, *p, 10.0)).collect(),
        };
        let (ds, stats) = register_events(
            &["q1".into()],
            &[vec![pass]],
            &t,
            50.0,
            2.0,
        )
        .unwrap();
        assert_eq!(stats.accepted, 1);
        assert_eq!(ds.events.len(), 1);
        assert_eq!(ds.value(0, 0, 1), 10.0);
    }

    #[test]
    fn far_pass_rejected() {
        let t = small_transect();
        let time = Utc.with_ymd_and_hms(2015, 6, 1, 12, 0, 0).unwrap();
        // nearest point to r_2 sits ~60 km away (0.54 deg of longitude)
        let pass = Pass {
            id: "p1".into(),
            observations: vec![
                obs(time, pt(0.0, 0.0), 1.0),
                obs(time, pt(0.0, 1.0), 2.0),
                obs(time, pt(0.0, 1.46), 3.0),
            ],
        };
        let err = register_events(&["q1".into()], &[vec![pass]], &t, 50.0, 2.0);
        assert!(matches!(err, Err(GeoError::NothingRegistered { rejected: 1, .. })));
    }

    #[test]
    fn matching_equals_brute_force() {
        // 3-location transect, 5 scattered points: compare against an
        // exhaustive all-pairs search
        let t = small_transect();
        let time = Utc.with_ymd_and_hms(2015, 6, 1, 12, 0, 0).unwrap();
        let pts = [
            pt(0.1, -0.05),
            pt(-0.2, 0.9),
            pt(0.05, 1.1),
            pt(0.12, 2.2),
            pt(-0.08, 1.9),
        ];
        let observations: Vec<TrackObservation> =
            pts.iter().enumerate().map(|(i, p)| obs(time, *p, i as f64)).collect();
        let pass = Pass { id: "p".into(), observations: observations.clone() };
        let (ds, _) =
            register_events(&["q1".into()], &[vec![pass]], &t, 50.0, 2.0).unwrap();
        for (j, r) in t.points().iter().enumerate() {
            let best = observations
                .iter()
                .min_by(|a, b| {
                    great_circle_distance(a.location, *r)
                        .total_cmp(&great_circle_distance(b.location, *r))
                })
                .unwrap();
            assert_eq!(ds.value(0, 0, j), best.value);
        }
    }

    #[test]
    fn counters_partition_input_passes() {
        let t = small_transect();
        let time = |h: u32| Utc.with_ymd_and_hms(2015, 6, 1, h, 0, 0).unwrap();
        let good = Pass {
            id: "good".into(),
            observations: t.points().iter().map(|p| obs(time(1), *p, 5.0)).collect(),
        };
        let far = Pass {
            id: "far".into(),
            observations: vec![obs(time(2), pt(10.0, 10.0), 1.0)],
        };
        let empty = Pass { id: "empty".into(), observations: vec![] };
        // second quantity pool only covers the first event's window
        let q2: Vec<Pass> = vec![Pass {
            id: "hind".into(),
            observations: t.points().iter().map(|p| obs(time(1), *p, 7.0)).collect(),
        }];
        let good2 = Pass {
            id: "good2".into(),
            observations: t.points().iter().map(|p| obs(time(20), *p, 6.0)).collect(),
        };
        let (ds, stats) = register_events(
            &["sat".into(), "hind".into()],
            &[vec![good, far, empty, good2], q2],
            &t,
            50.0,
            2.0,
        )
        .unwrap();
        assert_eq!(stats.accepted, 1);
        assert_eq!(stats.rejected_passes, 1);
        assert_eq!(stats.dropped_incomplete, 1); // good2 has no q2 coverage
        assert_eq!(stats.empty_passes, 1);
        assert_eq!(
            stats.accepted + stats.rejected_passes + stats.dropped_incomplete + stats.empty_passes,
            4
        );
        assert_eq!(ds.events.len(), 1);
        assert_eq!(ds.value(0, 1, 0), 7.0);
    }

    #[test]
    fn events_sorted_by_time() {
        let t = small_transect();
        let time = |h: u32| Utc.with_ymd_and_hms(2015, 6, 1, h, 0, 0).unwrap();
        let mk = |id: &str, h: u32, v: f64| Pass {
            id: id.into(),
            observations: t.points().iter().map(|p| obs(time(h), *p, v)).collect(),
        };
        let (ds, _) = register_events(
            &["q".into()],
            &[vec![mk("b", 12, 2.0), mk("a", 3, 1.0), mk("c", 20, 3.0)]],
            &t,
            50.0,
            2.0,
        )
        .unwrap();
        let vals: Vec<f64> = (0..3).map(|i| ds.value(i, 0, 0)).collect();
        assert_eq!(vals, vec![1.0, 2.0, 3.0]);
    }
}
