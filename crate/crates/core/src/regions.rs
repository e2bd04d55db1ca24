//! Operating regions of DERs in the `(P, Q)` plane, projections, Minkowski
//! sums and error-diffusion rounding onto discrete setpoints.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::Vector2;
use num_traits::Float;

use crate::error::{Error, Result};

/// `(P, Q)` setpoint.
pub type Setpoint = Vector2<f64>;

/// `{P ∈ [p_lo, p_hi], P² + Q² ≤ r²}`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Disk {
    pub p_lo: f64,
    pub p_hi: f64,
    pub r: f64,
}

impl Disk {
    /// Bounds outside `[−r, r]` are clamped, which leaves the set unchanged.
    pub fn new(p_lo: f64, p_hi: f64, r: f64) -> Result<Disk> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::InvalidRegion(format!("disk radius must be positive, got {r}")));
        }
        let (lo, hi) = (p_lo.max(-r), p_hi.min(r));
        if !(lo <= hi) {
            return Err(Error::InvalidRegion(format!("disk P-range [{p_lo}, {p_hi}] misses [-{r}, {r}]")));
        }
        Ok(Disk { p_lo: lo, p_hi: hi, r })
    }

    /// Half-height of the region at `p`.
    pub fn cap(&self, p: f64) -> f64 {
        Float::sqrt((self.r * self.r - p * p).max(0.0))
    }
}

/// `{P ∈ [p_lo, p_hi], Q = 0}`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Interval {
    pub p_lo: f64,
    pub p_hi: f64,
}

impl Interval {
    pub fn new(p_lo: f64, p_hi: f64) -> Result<Interval> {
        if !(p_lo <= p_hi) {
            return Err(Error::InvalidRegion(format!("interval [{p_lo}, {p_hi}] is empty")));
        }
        Ok(Interval { p_lo, p_hi })
    }
}

/// Sum of a disk and an interval `[a, b]`:
/// `{P ∈ [p_lo, p_hi], |Q| ≤ g(P)}` where `g = r` on `[a, b]` and follows
/// circular arcs of radius `r` centred at `a` and `b` outside it.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiskIntervalSum {
    pub p_lo: f64,
    pub p_hi: f64,
    pub r: f64,
    pub a: f64,
    pub b: f64,
}

impl DiskIntervalSum {
    pub fn new(p_lo: f64, p_hi: f64, r: f64, a: f64, b: f64) -> Result<DiskIntervalSum> {
        if !(r > 0.0) || !(a <= b) {
            return Err(Error::InvalidRegion(format!("bad disk-interval sum r={r}, [a, b]=[{a}, {b}]")));
        }
        let (lo, hi) = (p_lo.max(a - r), p_hi.min(b + r));
        if !(lo <= hi) {
            return Err(Error::InvalidRegion(format!("empty P-range [{p_lo}, {p_hi}]")));
        }
        Ok(DiskIntervalSum { p_lo: lo, p_hi: hi, r, a, b })
    }

    pub fn cap(&self, p: f64) -> f64 {
        capsule_cap(self.r, self.a, self.b, p)
    }
}

fn capsule_cap(r: f64, a: f64, b: f64, p: f64) -> f64 {
    let d = if p < a {
        a - p
    } else if p > b {
        p - b
    } else {
        0.0
    };
    Float::sqrt((r * r - d * d).max(0.0))
}

/// Convex polygon, vertices counter-clockwise without repetition. Two
/// vertices describe a segment.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Polygon {
    vertices: Vec<Setpoint>,
}

impl Polygon {
    pub fn vertices(&self) -> &[Setpoint] {
        &self.vertices
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum OperatingRegion {
    Disk(Disk),
    Interval(Interval),
    /// Finite set of implementable setpoints, in the given order.
    Discrete(Vec<Setpoint>),
    DiskIntervalSum(DiskIntervalSum),
    Singleton(Setpoint),
    Polygon(Polygon),
}

impl OperatingRegion {
    pub fn disk(p_lo: f64, p_hi: f64, r: f64) -> Result<OperatingRegion> {
        Disk::new(p_lo, p_hi, r).map(OperatingRegion::Disk)
    }

    pub fn interval(p_lo: f64, p_hi: f64) -> Result<OperatingRegion> {
        Interval::new(p_lo, p_hi).map(OperatingRegion::Interval)
    }

    pub fn discrete(points: Vec<Setpoint>) -> Result<OperatingRegion> {
        if points.is_empty() {
            return Err(Error::InvalidRegion("discrete set is empty".into()));
        }
        Ok(OperatingRegion::Discrete(points))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            OperatingRegion::Disk(_) => "disk",
            OperatingRegion::Interval(_) => "interval",
            OperatingRegion::Discrete(_) => "discrete",
            OperatingRegion::DiskIntervalSum(_) => "disk-interval sum",
            OperatingRegion::Singleton(_) => "singleton",
            OperatingRegion::Polygon(_) => "polygon",
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            OperatingRegion::Discrete(p) => p.len() == 1,
            _ => true,
        }
    }

    pub fn contains(&self, y: &Setpoint, tol: f64) -> bool {
        let (p, q) = (y.x, y.y);
        match self {
            OperatingRegion::Disk(d) => {
                p >= d.p_lo - tol && p <= d.p_hi + tol && Float::sqrt(p * p + q * q) <= d.r + tol
            }
            OperatingRegion::Interval(i) => p >= i.p_lo - tol && p <= i.p_hi + tol && q.abs() <= tol,
            OperatingRegion::Discrete(pts) => pts.iter().any(|x| (x - y).norm() <= tol),
            OperatingRegion::DiskIntervalSum(s) => {
                let c = Setpoint::new(p.clamp(s.a, s.b), 0.0);
                p >= s.p_lo - tol && p <= s.p_hi + tol && (y - c).norm() <= s.r + tol
            }
            OperatingRegion::Singleton(x) => (x - y).norm() <= tol,
            OperatingRegion::Polygon(poly) => (project_polygon(poly, y) - y).norm() <= tol,
        }
    }

    /// `(P_min, P_max, Q_min, Q_max)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match self {
            OperatingRegion::Disk(d) => {
                let q = if d.p_lo <= 0.0 && d.p_hi >= 0.0 { d.r } else { d.cap(d.p_lo).max(d.cap(d.p_hi)) };
                (d.p_lo, d.p_hi, -q, q)
            }
            OperatingRegion::Interval(i) => (i.p_lo, i.p_hi, 0.0, 0.0),
            OperatingRegion::DiskIntervalSum(s) => {
                let q = if s.p_hi >= s.a && s.p_lo <= s.b { s.r } else { s.cap(s.p_lo).max(s.cap(s.p_hi)) };
                (s.p_lo, s.p_hi, -q, q)
            }
            OperatingRegion::Singleton(x) => (x.x, x.x, x.y, x.y),
            OperatingRegion::Discrete(pts) => point_bounds(pts),
            OperatingRegion::Polygon(poly) => point_bounds(&poly.vertices),
        }
    }

    /// Length of the bounding-box diagonal.
    pub fn diameter(&self) -> f64 {
        let (p0, p1, q0, q1) = self.bounds();
        Float::hypot(p1 - p0, q1 - q0)
    }

    /// A point well inside the region: mid-range `P` on the `Q = 0` axis for
    /// the disk-like variants, vertex mean for polygons.
    pub fn center(&self) -> Setpoint {
        match self {
            OperatingRegion::Disk(d) => Setpoint::new(0.5 * (d.p_lo + d.p_hi), 0.0),
            OperatingRegion::Interval(i) => Setpoint::new(0.5 * (i.p_lo + i.p_hi), 0.0),
            OperatingRegion::DiskIntervalSum(s) => Setpoint::new(0.5 * (s.p_lo + s.p_hi), 0.0),
            OperatingRegion::Singleton(x) => *x,
            OperatingRegion::Discrete(pts) => mean(pts),
            OperatingRegion::Polygon(poly) => mean(&poly.vertices),
        }
    }

    /// Region used by the continuous update: the convex hull for discrete
    /// sets, the region itself otherwise.
    pub fn relaxed(&self) -> OperatingRegion {
        match self {
            OperatingRegion::Discrete(pts) => convex_hull(pts),
            other => other.clone(),
        }
    }
}

fn point_bounds(pts: &[Setpoint]) -> (f64, f64, f64, f64) {
    pts.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), x| (a.min(x.x), b.max(x.x), c.min(x.y), d.max(x.y)),
    )
}

fn mean(pts: &[Setpoint]) -> Setpoint {
    pts.iter().fold(Setpoint::zeros(), |acc, x| acc + x) / pts.len() as f64
}

/// Closest point of the region. Discrete ties go to the lowest index.
pub fn project(region: &OperatingRegion, y: &Setpoint) -> Setpoint {
    match region {
        OperatingRegion::Disk(d) => project_capsule_slab(d.r, 0.0, 0.0, d.p_lo, d.p_hi, y),
        OperatingRegion::Interval(i) => Setpoint::new(y.x.clamp(i.p_lo, i.p_hi), 0.0),
        OperatingRegion::Discrete(pts) => nearest(pts, y, &Setpoint::new(1.0, 1.0)),
        OperatingRegion::DiskIntervalSum(s) => project_capsule_slab(s.r, s.a, s.b, s.p_lo, s.p_hi, y),
        OperatingRegion::Singleton(x) => *x,
        OperatingRegion::Polygon(poly) => project_polygon(poly, y),
    }
}

fn nearest(pts: &[Setpoint], y: &Setpoint, w: &Setpoint) -> Setpoint {
    let cost = |x: &Setpoint| w.x * (x.x - y.x).powi(2) + w.y * (x.y - y.y).powi(2);
    let mut best = pts[0];
    let mut best_cost = cost(&best);
    for x in &pts[1..] {
        let c = cost(x);
        if c < best_cost {
            best = *x;
            best_cost = c;
        }
    }
    best
}

/// Projection onto `{P ∈ [lo, hi]} ∩ {dist((P, Q), [a, b] × {0}) ≤ r}`.
/// The answer is the projection onto one of the two sets when that lands in
/// the other, otherwise a corner where the slab edge meets the cap.
fn project_capsule_slab(r: f64, a: f64, b: f64, lo: f64, hi: f64, y: &Setpoint) -> Setpoint {
    let in_slab = |x: &Setpoint| x.x >= lo && x.x <= hi;
    let in_capsule = |x: &Setpoint| {
        let c = Setpoint::new(x.x.clamp(a, b), 0.0);
        (x - c).norm() <= r * (1.0 + 1e-15)
    };
    if in_slab(y) && in_capsule(y) {
        return *y;
    }
    let c = Setpoint::new(y.x.clamp(a, b), 0.0);
    let d = y - c;
    let dn = d.norm();
    let to_capsule = if dn <= r { *y } else { c + d * (r / dn) };
    if in_slab(&to_capsule) {
        return to_capsule;
    }
    let to_slab = Setpoint::new(y.x.clamp(lo, hi), y.y);
    if in_capsule(&to_slab) {
        return to_slab;
    }
    let mut best = Setpoint::new(lo, 0.0);
    let mut best_d = f64::INFINITY;
    for p in [lo, hi] {
        let g = capsule_cap(r, a, b, p);
        for q in [g, -g] {
            let x = Setpoint::new(p, q);
            let dist = (x - y).norm_squared();
            if dist < best_d {
                best = x;
                best_d = dist;
            }
        }
    }
    best
}

fn project_segment(p: &Setpoint, q: &Setpoint, y: &Setpoint) -> Setpoint {
    let d = q - p;
    let len2 = d.norm_squared();
    if len2 == 0.0 {
        return *p;
    }
    let t = ((y - p).dot(&d) / len2).clamp(0.0, 1.0);
    p + d * t
}

fn cross(o: &Setpoint, a: &Setpoint, b: &Setpoint) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn project_polygon(poly: &Polygon, y: &Setpoint) -> Setpoint {
    let v = &poly.vertices;
    match v.len() {
        1 => return v[0],
        2 => return project_segment(&v[0], &v[1], y),
        _ => {}
    }
    let n = v.len();
    if (0..n).all(|i| cross(&v[i], &v[(i + 1) % n], y) >= 0.0) {
        return *y;
    }
    let mut best = v[0];
    let mut best_d = f64::INFINITY;
    for i in 0..n {
        let x = project_segment(&v[i], &v[(i + 1) % n], y);
        let d = (x - y).norm_squared();
        if d < best_d {
            best = x;
            best_d = d;
        }
    }
    best
}

/// `argmin_x w_P (P − y_P)² + w_Q (Q − y_Q)²` over the region; weights must
/// be positive. Disk-interval sums are not supported.
pub fn weighted_project(region: &OperatingRegion, y: &Setpoint, w: &Setpoint) -> Result<Setpoint> {
    if !(w.x > 0.0 && w.y > 0.0) {
        return Err(Error::Parameter(format!("projection weights must be positive, got ({}, {})", w.x, w.y)));
    }
    if w.x == w.y {
        return match region {
            OperatingRegion::DiskIntervalSum(_) => Err(Error::UnsupportedRegion("weighted projection on a disk-interval sum")),
            _ => Ok(project(region, y)),
        };
    }
    Ok(match region {
        OperatingRegion::Disk(d) => weighted_project_disk(d, y, w),
        OperatingRegion::Interval(i) => Setpoint::new(y.x.clamp(i.p_lo, i.p_hi), 0.0),
        OperatingRegion::Discrete(pts) => nearest(pts, y, w),
        OperatingRegion::Singleton(x) => *x,
        OperatingRegion::Polygon(poly) => {
            let s = Setpoint::new(Float::sqrt(w.x), Float::sqrt(w.y));
            let scaled = Polygon { vertices: poly.vertices.iter().map(|v| v.component_mul(&s)).collect() };
            project_polygon(&scaled, &y.component_mul(&s)).component_div(&s)
        }
        OperatingRegion::DiskIntervalSum(_) => {
            return Err(Error::UnsupportedRegion("weighted projection on a disk-interval sum"))
        }
    })
}

/// Candidates are the unconstrained point, the slab clamp, the point on the
/// circle from the KKT multiplier, and the best point on each slab face. The
/// cheapest feasible one is the minimizer.
fn weighted_project_disk(d: &Disk, y: &Setpoint, w: &Setpoint) -> Setpoint {
    let region = OperatingRegion::Disk(*d);
    let cost = |x: &Setpoint| w.x * (x.x - y.x).powi(2) + w.y * (x.y - y.y).powi(2);
    let feasible = |x: &Setpoint| region.contains(x, 1e-12 * d.r.max(1.0));
    let mut cands: Vec<Setpoint> = Vec::with_capacity(5);
    cands.push(*y);
    cands.push(Setpoint::new(y.x.clamp(d.p_lo, d.p_hi), y.y));
    if y.norm() > d.r {
        // φ(μ) = Σ (w y / (w + μ))² − r² is convex and decreasing on μ ≥ 0
        let phi = |mu: f64| {
            let p = w.x * y.x / (w.x + mu);
            let q = w.y * y.y / (w.y + mu);
            (p * p + q * q - d.r * d.r, -2.0 * (p * p / (w.x + mu) + q * q / (w.y + mu)))
        };
        let mut mu = 0.0;
        for _ in 0..100 {
            let (f, df) = phi(mu);
            if f.abs() <= 1e-15 * d.r * d.r || df == 0.0 {
                break;
            }
            let next = mu - f / df;
            if next <= mu {
                break;
            }
            mu = next;
        }
        let p = w.x * y.x / (w.x + mu);
        let q = w.y * y.y / (w.y + mu);
        // snap onto the circle to absorb the last Newton residual
        let n = Float::hypot(p, q);
        cands.push(Setpoint::new(p, q) * (d.r / n));
    }
    for p in [d.p_lo, d.p_hi] {
        let g = d.cap(p);
        cands.push(Setpoint::new(p, y.y.clamp(-g, g)));
    }
    let mut best = cands[cands.len() - 1];
    let mut best_cost = f64::INFINITY;
    for x in cands.iter().filter(|x| feasible(x)) {
        let c = cost(x);
        if c < best_cost {
            best = *x;
            best_cost = c;
        }
    }
    best
}

pub fn minkowski_interval(i1: &Interval, i2: &Interval) -> Interval {
    Interval { p_lo: i1.p_lo + i2.p_lo, p_hi: i1.p_hi + i2.p_hi }
}

/// Exact sum of a disk with `p_lo ≤ 0 ≤ p_hi` and an interval.
pub fn minkowski_disk_interval(d: &Disk, i: &Interval) -> Result<DiskIntervalSum> {
    if d.p_lo > 0.0 || d.p_hi < 0.0 {
        return Err(Error::Precondition(format!(
            "disk P-range [{}, {}] must contain 0 to add an interval exactly",
            d.p_lo, d.p_hi
        )));
    }
    Ok(DiskIntervalSum { p_lo: d.p_lo + i.p_lo, p_hi: d.p_hi + i.p_hi, r: d.r, a: i.p_lo, b: i.p_hi })
}

/// Largest radius `ρ` for which `Disk(p_lo₁+p_lo₂, p_hi₁+p_hi₂, ρ)` is inside
/// the sum of the two disks; `ρ²` may be zero.
pub fn inner_radius_squared(d1: &Disk, d2: &Disk) -> f64 {
    let lo = d1.p_lo + d2.p_lo;
    let hi = d1.p_hi + d2.p_hi;
    let alpha = lo.max(hi.min(0.0)).powi(2);
    let beta = |d: &Disk| d.p_lo.powi(2).max(d.p_hi.powi(2)).min(d.r * d.r);
    let (b1, b2) = (beta(d1), beta(d2));
    let (r1, r2) = (d1.r * d1.r, d2.r * d2.r);
    r1 + r2 + alpha - b1 - b2 + 2.0 * Float::sqrt((r1 - b1) * (r2 - b2))
}

/// Inner approximation of the sum of two disks.
pub fn minkowski_disk_disk_inner(d1: &Disk, d2: &Disk) -> Result<Disk> {
    let rho2 = inner_radius_squared(d1, d2);
    if !(rho2 > 0.0) {
        return Err(Error::DegenerateAggregate(format!(
            "inner radius vanishes for disks {d1:?} and {d2:?}"
        )));
    }
    Disk::new(d1.p_lo + d2.p_lo, d1.p_hi + d2.p_hi, Float::sqrt(rho2))
}

/// Outer approximation of the sum of two disks.
pub fn minkowski_disk_disk_outer(d1: &Disk, d2: &Disk) -> Disk {
    Disk { p_lo: d1.p_lo + d2.p_lo, p_hi: d1.p_hi + d2.p_hi, r: d1.r + d2.r }
}

/// Inner approximation of the sum of several regions: disks are combined
/// pairwise in order, intervals (and singletons on `Q = 0`) are summed, and
/// the two partial results are added exactly.
pub fn fold_aggregate(regions: &[OperatingRegion]) -> Result<OperatingRegion> {
    if regions.is_empty() {
        return Err(Error::InvalidRegion("cannot aggregate an empty list".into()));
    }
    if regions.len() == 1 {
        return Ok(regions[0].clone());
    }
    let mut disk: Option<Disk> = None;
    let mut interval: Option<Interval> = None;
    for r in regions {
        match r {
            OperatingRegion::Disk(d) => {
                disk = Some(match disk {
                    None => *d,
                    Some(acc) => minkowski_disk_disk_inner(&acc, d)?,
                })
            }
            OperatingRegion::Interval(_) | OperatingRegion::Singleton(_) => {
                let i = match r {
                    OperatingRegion::Interval(i) => *i,
                    OperatingRegion::Singleton(x) if x.y == 0.0 => Interval { p_lo: x.x, p_hi: x.x },
                    _ => return Err(Error::UnsupportedRegion("singleton with Q != 0 in an aggregate")),
                };
                interval = Some(match interval {
                    None => i,
                    Some(acc) => minkowski_interval(&acc, &i),
                })
            }
            OperatingRegion::Discrete(_) => return Err(Error::UnsupportedRegion("discrete set (take its hull first)")),
            OperatingRegion::DiskIntervalSum(_) => return Err(Error::UnsupportedRegion("disk-interval sum")),
            OperatingRegion::Polygon(_) => return Err(Error::UnsupportedRegion("polygon")),
        }
    }
    Ok(match (disk, interval) {
        (Some(d), Some(i)) => OperatingRegion::DiskIntervalSum(minkowski_disk_interval(&d, &i)?),
        (Some(d), None) => OperatingRegion::Disk(d),
        (None, Some(i)) => OperatingRegion::Interval(i),
        (None, None) => unreachable!("non-empty list"),
    })
}

/// Convex hull of a finite point set: a singleton, an interval when every
/// point has `Q = 0`, or a polygon otherwise.
pub fn convex_hull(points: &[Setpoint]) -> OperatingRegion {
    assert!(!points.is_empty(), "convex hull of an empty set");
    let mut pts: Vec<Setpoint> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() == 1 {
        return OperatingRegion::Singleton(pts[0]);
    }
    if pts.iter().all(|p| p.y == 0.0) {
        return OperatingRegion::Interval(Interval { p_lo: pts[0].x, p_hi: pts[pts.len() - 1].x });
    }
    // monotone chain
    let mut hull: Vec<Setpoint> = Vec::with_capacity(2 * pts.len());
    for pass in [&pts[..], &pts.iter().rev().copied().collect::<Vec<_>>()[..]] {
        let start = hull.len();
        for p in pass {
            while hull.len() >= start + 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    if hull.len() < 2 {
        // every point collinear and the chain collapsed onto the end points
        hull = alloc::vec![pts[0], pts[pts.len() - 1]];
    }
    OperatingRegion::Polygon(Polygon { vertices: hull })
}

/// Running sum of continuous-minus-implemented setpoints.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ErrorAccumulator {
    pub eps: Setpoint,
    pub history_len: usize,
    /// Largest `‖eps‖` seen so far.
    pub max_norm: f64,
}

/// Rounds `x_cont` to the discrete set after adding the accumulated error.
pub fn error_diffusion_step(
    points: &[Setpoint],
    x_cont: &Setpoint,
    acc: &ErrorAccumulator,
) -> (Setpoint, ErrorAccumulator) {
    let x_impl = nearest(points, &(x_cont + acc.eps), &Setpoint::new(1.0, 1.0));
    let eps = acc.eps + (x_cont - x_impl);
    let next = ErrorAccumulator { eps, history_len: acc.history_len + 1, max_norm: acc.max_norm.max(eps.norm()) };
    (x_impl, next)
}
