//! Coil geometries (solenoid, saddle, detection loop, transverse cancellation
//! pair), finite-segment Biot-Savart evaluation, and flux quadrature over
//! coil sensing surfaces.
//!
//! Quadrature nodes are generated in mirrored pairs about each coil's
//! symmetry plane and summed pairwise, so flux cancellations that follow
//! from field antisymmetry hold to rounding rather than to a quadrature
//! tolerance.

use crate::error::{CoreError, Result};
use crate::geom::{RigidTransform, Vec3};
use crate::grid::FieldSource;
use crate::{C64, MU_0};
use serde::{Deserialize, Serialize};

/// Minimum distance between a field point and any current segment before the
/// evaluation is considered singular.
pub const SINGULARITY_LIMIT: f64 = 1e-6;

/// Minimum segment length, meters.
pub const MIN_SEGMENT_LEN: f64 = 1e-9;

/// Piecewise-linear 3D current path: a set of closed loops (turns) carrying
/// a common complex phasor current.
#[derive(Debug, Clone)]
pub struct WindingPath {
    /// Each loop is an ordered vertex list; the loop closes back to its
    /// first vertex.
    pub loops: Vec<Vec<Vec3>>,
    /// Signed phasor current, amperes.
    pub current: C64,
}

impl WindingPath {
    pub fn new(loops: Vec<Vec<Vec3>>, current: C64) -> Result<Self> {
        let path = WindingPath { loops, current };
        path.validate()?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        for (li, lp) in self.loops.iter().enumerate() {
            if lp.len() < 3 {
                return Err(CoreError::InvalidSpec(format!(
                    "loop {li} has fewer than 3 vertices"
                )));
            }
            for i in 0..lp.len() {
                let a = lp[i];
                let b = lp[(i + 1) % lp.len()];
                if (b - a).norm() <= MIN_SEGMENT_LEN {
                    return Err(CoreError::InvalidSpec(format!(
                        "degenerate segment in loop {li} at vertex {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total number of straight segments.
    pub fn segment_count(&self) -> usize {
        self.loops.iter().map(|l| l.len()).sum()
    }

    /// Iterate all segments as (start, end) pairs.
    pub fn segments(&self) -> impl Iterator<Item = (Vec3, Vec3)> + '_ {
        self.loops.iter().flat_map(|lp| {
            (0..lp.len()).map(move |i| (lp[i], lp[(i + 1) % lp.len()]))
        })
    }

    /// All vertices transformed by `f` (used for posing).
    fn map_points(&self, f: impl Fn(Vec3) -> Vec3) -> WindingPath {
        WindingPath {
            loops: self
                .loops
                .iter()
                .map(|lp| lp.iter().map(|&p| f(p)).collect())
                .collect(),
            current: self.current,
        }
    }

    /// CSV export of segment endpoints: `loop,ax,ay,az,bx,by,bz` per line.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "loop,ax,ay,az,bx,by,bz")?;
        for (li, lp) in self.loops.iter().enumerate() {
            for i in 0..lp.len() {
                let a = lp[i];
                let b = lp[(i + 1) % lp.len()];
                writeln!(w, "{li},{},{},{},{},{},{}", a.x, a.y, a.z, b.x, b.y, b.z)?;
            }
        }
        Ok(())
    }
}

/// Kind-specific coil parameters. All canonical frames put the coil at the
/// origin; `CoilSpec::pose` moves it into the cavity frame.
///
/// Canonical orientations: solenoid axis along x; saddle on a cylinder with
/// axis x, windows centered on +y / -y; detection loop normal along y;
/// cancellation pair sides at y = +/- half_gap with normals along y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoilKind {
    Solenoid {
        radius: f64,
        length: f64,
        turns: usize,
    },
    Saddle {
        radius: f64,
        arc_deg: f64,
        span: f64,
        turns: usize,
    },
    DetectionLoop {
        radius: f64,
        turns: usize,
    },
    /// Transverse cancellation winding: on each side, `turns_per_side`
    /// rectangular turns whose x positions follow a linear turn-density
    /// profile, denser toward +x (the outer, aperture-facing edge).
    CancellationPair {
        half_gap: f64,
        /// x extent over which turn centers are distributed.
        span: f64,
        turn_half_width: f64,
        turn_half_height: f64,
        turns_per_side: usize,
        /// Outer-to-inner turn density ratio (>= 1).
        density_ratio: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoilSpec {
    pub kind: CoilKind,
    pub pose: RigidTransform,
}

impl CoilSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CoreError::InvalidSpec(msg.to_string()));
        match &self.kind {
            CoilKind::Solenoid { radius, length, turns } => {
                if *radius <= 0.0 || *length <= 0.0 {
                    return bad("solenoid radius and length must be positive");
                }
                if *turns < 1 {
                    return bad("solenoid must have at least one turn");
                }
            }
            CoilKind::Saddle { radius, arc_deg, span, turns } => {
                if *radius <= 0.0 || *span <= 0.0 {
                    return bad("saddle radius and span must be positive");
                }
                if !(*arc_deg > 0.0 && *arc_deg <= 180.0) {
                    return bad("saddle arc angle must lie in (0, 180] degrees");
                }
                if *turns < 1 {
                    return bad("saddle must have at least one turn");
                }
            }
            CoilKind::DetectionLoop { radius, turns } => {
                if *radius <= 0.0 {
                    return bad("detection loop radius must be positive");
                }
                if *turns < 1 {
                    return bad("detection loop must have at least one turn");
                }
            }
            CoilKind::CancellationPair {
                half_gap,
                span,
                turn_half_width,
                turn_half_height,
                turns_per_side,
                density_ratio,
            } => {
                if *half_gap <= 0.0
                    || *span <= 0.0
                    || *turn_half_width <= 0.0
                    || *turn_half_height <= 0.0
                {
                    return bad("cancellation pair dimensions must be positive");
                }
                if *turns_per_side < 1 {
                    return bad("cancellation pair needs at least one turn per side");
                }
                if *density_ratio < 1.0 {
                    return bad("density ratio must be >= 1");
                }
            }
        }
        Ok(())
    }
}

/// Turn-center x positions for a linear turn-density profile on
/// `[-span/2, +span/2]`, denser toward +span/2. Strictly increasing; spacing
/// strictly decreasing toward the outer edge when `ratio > 1`.
pub fn density_turn_positions(span: f64, n: usize, ratio: f64) -> Vec<f64> {
    // density lambda(u) = 1 + (ratio - 1) u on u in [0, 1];
    // positions are midpoint quantiles of the cumulative density.
    let total = 1.0 + (ratio - 1.0) / 2.0;
    (0..n)
        .map(|k| {
            let t = (k as f64 + 0.5) / n as f64 * total;
            let u = if (ratio - 1.0).abs() < 1e-12 {
                t / total
            } else {
                let a = (ratio - 1.0) / 2.0;
                (-1.0 + (1.0 + 4.0 * a * t).sqrt()) / (2.0 * a)
            };
            (u - 0.5) * span
        })
        .collect()
}

fn circle_vertices(radius: f64, n: usize) -> Vec<(f64, f64)> {
    // Half-offset vertices: the set is symmetric under (c, s) -> (-c, s)
    // for even n, which mirrors the loop about the c = 0 plane.
    (0..n)
        .map(|j| {
            let psi = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / n as f64;
            (radius * psi.cos(), radius * psi.sin())
        })
        .collect()
}

/// Discretize a coil spec into a winding path (unit current).
///
/// Doubling `segments_per_turn` changes field evaluations at two or more
/// coil radii by under 0.5%, shrinking quadratically with further doubling.
pub fn realize_coil(spec: &CoilSpec, segments_per_turn: usize) -> Result<WindingPath> {
    spec.validate()?;
    if segments_per_turn < 8 {
        return Err(CoreError::InvalidSpec(format!(
            "segments_per_turn must be >= 8, got {segments_per_turn}"
        )));
    }
    let mut loops: Vec<Vec<Vec3>> = Vec::new();
    match &spec.kind {
        CoilKind::Solenoid { radius, length, turns } => {
            for k in 0..*turns {
                let x = if *turns == 1 {
                    0.0
                } else {
                    -length / 2.0 + length * k as f64 / (*turns as f64 - 1.0)
                };
                loops.push(
                    circle_vertices(*radius, segments_per_turn)
                        .into_iter()
                        .map(|(c, s)| Vec3::new(x, c, s))
                        .collect(),
                );
            }
        }
        CoilKind::DetectionLoop { radius, turns } => {
            for _ in 0..*turns {
                loops.push(
                    circle_vertices(*radius, segments_per_turn)
                        .into_iter()
                        .map(|(c, s)| Vec3::new(s, 0.0, c))
                        .collect(),
                );
            }
        }
        CoilKind::Saddle { radius, arc_deg, span, turns } => {
            // One window centered on +y; the second is its exact y-mirror
            // with reversed traversal so the flux sensitivities add.
            let half_arc = arc_deg.to_radians() / 2.0;
            let n_arc = (segments_per_turn / 4).max(2);
            let mut window = Vec::new();
            // Rear arc at x = -span/2, psi from -half_arc to +half_arc.
            for i in 0..=n_arc {
                let psi = -half_arc + 2.0 * half_arc * i as f64 / n_arc as f64;
                window.push(Vec3::new(-span / 2.0, radius * psi.cos(), radius * psi.sin()));
            }
            // Axial run at +half_arc, then front arc back, then axial return.
            for i in 1..=n_arc {
                let psi = half_arc - 2.0 * half_arc * i as f64 / n_arc as f64;
                window.push(Vec3::new(span / 2.0, radius * psi.cos(), radius * psi.sin()));
            }
            let mirror: Vec<Vec3> = window
                .iter()
                .rev()
                .map(|p| Vec3::new(p.x, -p.y, p.z))
                .collect();
            for _ in 0..*turns {
                loops.push(window.clone());
                loops.push(mirror.clone());
            }
        }
        CoilKind::CancellationPair {
            half_gap,
            span,
            turn_half_width,
            turn_half_height,
            turns_per_side,
            density_ratio,
        } => {
            let xs = density_turn_positions(*span, *turns_per_side, *density_ratio);
            let n_edge = (segments_per_turn / 4).max(1);
            let rect = |xc: f64, y: f64| -> Vec<Vec3> {
                // Traversed z-first so the loop normal points along +y.
                let (wx, hz) = (*turn_half_width, *turn_half_height);
                let corners = [
                    Vec3::new(xc - wx, y, -hz),
                    Vec3::new(xc - wx, y, hz),
                    Vec3::new(xc + wx, y, hz),
                    Vec3::new(xc + wx, y, -hz),
                ];
                let mut pts = Vec::new();
                for e in 0..4 {
                    let a = corners[e];
                    let b = corners[(e + 1) % 4];
                    for i in 0..n_edge {
                        let t = i as f64 / n_edge as f64;
                        pts.push(a + (b - a) * t);
                    }
                }
                pts
            };
            for &xc in &xs {
                loops.push(rect(xc, *half_gap));
                loops.push(rect(xc, -*half_gap));
            }
        }
    }
    let path = WindingPath::new(loops, C64::new(1.0, 0.0))?;
    Ok(path.map_points(|p| spec.pose.apply(p)))
}

fn dist_point_segment(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(ab) / ab.norm_sq()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Magnetic field H (A/m) of a winding path at a point, by the exact
/// finite-segment Biot-Savart kernel. Linear in the path current.
///
/// Points closer than [`SINGULARITY_LIMIT`] to any segment raise a
/// singularity error; there is no silent regularization.
pub fn field_at(path: &WindingPath, point: Vec3) -> Result<[C64; 3]> {
    let mut acc = Vec3::ZERO;
    for (a, b) in path.segments() {
        let l = b - a;
        let r1 = point - a;
        let r2 = point - b;
        let cross = l.cross(r1);
        let c2 = cross.norm_sq();
        let d = dist_point_segment(point, a, b);
        if d < SINGULARITY_LIMIT {
            return Err(CoreError::Singularity { dist: d, limit: SINGULARITY_LIMIT });
        }
        if c2 == 0.0 {
            // Point on the segment's carrier line but outside the segment:
            // the exact finite-segment contribution is zero.
            continue;
        }
        let k = (l.dot(r1) / r1.norm() - l.dot(r2) / r2.norm()) / c2;
        acc = acc + cross * k;
    }
    let scale = 1.0 / (4.0 * std::f64::consts::PI);
    Ok([
        path.current * (acc.x * scale),
        path.current * (acc.y * scale),
        path.current * (acc.z * scale),
    ])
}

impl FieldSource for WindingPath {
    fn h_at(&self, p: Vec3) -> Result<[C64; 3]> {
        field_at(self, p)
    }
}

/// Complex flux through a coil's sensing surface.
#[derive(Debug, Clone)]
pub struct FluxResult {
    /// Total flux, webers: mu0 * surface integral of H dot dA, summed over
    /// turns.
    pub flux: C64,
    pub per_turn: Vec<C64>,
}

/// One quadrature node: world position, world normal scaled by the node
/// weight times area element, and the index of its mirror partner.
struct SurfaceNode {
    pos: Vec3,
    weighted_normal: Vec3,
}

/// Per-turn quadrature surfaces; nodes are stored as consecutive mirrored
/// pairs so symmetric cancellations collapse pairwise.
struct SensingSurface {
    turns: Vec<Vec<SurfaceNode>>,
}

fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Nodes/weights on [-1, 1] by Newton iteration on Legendre polynomials.
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0f64, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0f64, x);
        for k in 2..=n {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Disk quadrature in a local plane. `embed` maps local in-plane (u, v) to a
/// canonical 3D point; `normal` is the canonical unit normal; `mirror`
/// reflects a canonical point across the coil symmetry plane.
fn disk_nodes(
    radius: f64,
    order: usize,
    embed: &dyn Fn(f64, f64) -> Vec3,
    normal: Vec3,
    mirror: &dyn Fn(Vec3) -> Vec3,
    mirror_normal: Vec3,
) -> Vec<SurfaceNode> {
    let (rn, rw) = gauss_legendre(order);
    let m_half = (2 * order).max(4);
    let dpsi = std::f64::consts::PI / m_half as f64;
    let mut nodes = Vec::new();
    for (ri, &rx) in rn.iter().enumerate() {
        let r = radius * (rx + 1.0) / 2.0;
        let wr = rw[ri] * radius / 2.0 * r;
        for j in 0..m_half {
            let psi = -std::f64::consts::PI / 2.0 + (j as f64 + 0.5) * dpsi;
            let (u, v) = (r * psi.cos(), r * psi.sin());
            let w = wr * dpsi;
            let p = embed(u, v);
            nodes.push(SurfaceNode { pos: p, weighted_normal: normal * w });
            nodes.push(SurfaceNode { pos: mirror(p), weighted_normal: mirror_normal * w });
        }
    }
    nodes
}

fn rect_nodes(
    xc: f64,
    y: f64,
    wx: f64,
    hz: f64,
    order: usize,
) -> Vec<SurfaceNode> {
    let (gn, gw) = gauss_legendre(order);
    let mut nodes = Vec::new();
    for (i, &u) in gn.iter().enumerate() {
        let x = xc + wx * u;
        for (j, &v) in gn.iter().enumerate() {
            // Mirror pair about z = 0 (GL nodes are +/- symmetric; pair the
            // node with its explicit z reflection).
            let z = hz * v;
            let w = gw[i] * gw[j] * wx * hz;
            nodes.push(SurfaceNode {
                pos: Vec3::new(x, y, z),
                weighted_normal: Vec3::new(0.0, w, 0.0),
            });
        }
    }
    nodes
}

fn build_surface(spec: &CoilSpec, order: usize) -> Result<SensingSurface> {
    spec.validate()?;
    if order < 2 {
        return Err(CoreError::InvalidSpec("quadrature order must be >= 2".into()));
    }
    let mut turns: Vec<Vec<SurfaceNode>> = Vec::new();
    match &spec.kind {
        CoilKind::Solenoid { radius, length, turns: n } => {
            for k in 0..*n {
                let x = if *n == 1 {
                    0.0
                } else {
                    -length / 2.0 + length * k as f64 / (*n as f64 - 1.0)
                };
                // Disk in the y-z plane, normal +x; mirror plane y = 0.
                turns.push(disk_nodes(
                    *radius,
                    order,
                    &|u, v| Vec3::new(x, u, v),
                    Vec3::new(1.0, 0.0, 0.0),
                    &|p| Vec3::new(p.x, -p.y, p.z),
                    Vec3::new(1.0, 0.0, 0.0),
                ));
            }
        }
        CoilKind::DetectionLoop { radius, turns: n } => {
            for _ in 0..*n {
                // Disk in the z-x plane, normal +y; mirror plane z = 0.
                turns.push(disk_nodes(
                    *radius,
                    order,
                    &|u, v| Vec3::new(v, 0.0, u),
                    Vec3::new(0.0, 1.0, 0.0),
                    &|p| Vec3::new(p.x, p.y, -p.z),
                    Vec3::new(0.0, 1.0, 0.0),
                ));
            }
        }
        CoilKind::Saddle { radius, arc_deg, span, turns: n } => {
            let half_arc = arc_deg.to_radians() / 2.0;
            let (gn, gw) = gauss_legendre(order);
            for _ in 0..*n {
                let mut nodes = Vec::new();
                for (i, &u) in gn.iter().enumerate() {
                    let x = span / 2.0 * u;
                    for (j, &v) in gn.iter().enumerate() {
                        let psi = half_arc * v;
                        let w = gw[i] * gw[j] * (span / 2.0) * (half_arc * radius);
                        let p = Vec3::new(x, radius * psi.cos(), radius * psi.sin());
                        let nrm = Vec3::new(0.0, psi.cos(), psi.sin());
                        nodes.push(SurfaceNode { pos: p, weighted_normal: nrm * w });
                        // Opposite window, reversed circulation: normal flips
                        // with the mirror so uniform Hy contributions add.
                        nodes.push(SurfaceNode {
                            pos: Vec3::new(p.x, -p.y, p.z),
                            weighted_normal: Vec3::new(0.0, nrm.y, -nrm.z) * w,
                        });
                    }
                }
                turns.push(nodes);
            }
        }
        CoilKind::CancellationPair {
            half_gap,
            span,
            turn_half_width,
            turn_half_height,
            turns_per_side,
            density_ratio,
        } => {
            let xs = density_turn_positions(*span, *turns_per_side, *density_ratio);
            for &xc in &xs {
                turns.push(rect_nodes(xc, *half_gap, *turn_half_width, *turn_half_height, order));
                turns.push(rect_nodes(xc, -*half_gap, *turn_half_width, *turn_half_height, order));
            }
        }
    }
    // Pose nodes and normals into the world frame.
    for t in &mut turns {
        for node in t.iter_mut() {
            node.pos = spec.pose.apply(node.pos);
            node.weighted_normal = spec.pose.rotate(node.weighted_normal);
        }
    }
    Ok(SensingSurface { turns })
}

/// Surface integral of `mu0 * H` over each turn's spanning surface.
///
/// `field` may be a grid (trilinear interpolation), a winding path
/// (Biot-Savart), or any other [`FieldSource`].
pub fn flux_through(
    field: &dyn FieldSource,
    coil: &CoilSpec,
    quadrature_order: usize,
) -> Result<FluxResult> {
    let surface = build_surface(coil, quadrature_order)?;
    let mut per_turn = Vec::with_capacity(surface.turns.len());
    let mut total = C64::new(0.0, 0.0);
    for turn in &surface.turns {
        let mut acc = C64::new(0.0, 0.0);
        for node in turn {
            let h = field.h_at(node.pos)?;
            acc += h[0] * node.weighted_normal.x
                + h[1] * node.weighted_normal.y
                + h[2] * node.weighted_normal.z;
        }
        let f = acc * MU_0;
        per_turn.push(f);
        total += f;
    }
    Ok(FluxResult { flux: total, per_turn })
}

/// Mutual coupling matrix: entry (i, j) is the flux through coil i per unit
/// current in coil j. Diagonal entries are zero; self-inductance extraction
/// is out of scope.
pub fn mutual_coupling_matrix(
    coils: &[CoilSpec],
    segments_per_turn: usize,
    quadrature_order: usize,
) -> Result<Vec<Vec<C64>>> {
    if coils.len() < 2 {
        return Err(CoreError::InvalidSpec("need at least two coils".into()));
    }
    for i in 0..coils.len() {
        for j in (i + 1)..coils.len() {
            if coils[i] == coils[j] {
                return Err(CoreError::InvalidSpec(format!(
                    "coils {i} and {j} are identical (overlapping windings)"
                )));
            }
        }
    }
    let paths: Vec<WindingPath> = coils
        .iter()
        .map(|c| realize_coil(c, segments_per_turn))
        .collect::<Result<_>>()?;
    let mut m = vec![vec![C64::new(0.0, 0.0); coils.len()]; coils.len()];
    for (i, coil) in coils.iter().enumerate() {
        for (j, path) in paths.iter().enumerate() {
            if i == j {
                continue;
            }
            m[i][j] = flux_through(path, coil, quadrature_order)?.flux;
        }
    }
    Ok(m)
}
