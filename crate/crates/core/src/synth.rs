//! Seeded synthetic scenes: ground, roads, box buildings, cylindrical trees
//! and poles around each place, sampled into labeled clouds, plus query
//! observations rendered from a place at a chosen heading.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::config::{stream_rng, Config, Rng};
use crate::encoder::QueryObservation;
use crate::error::{Error, Result};
use crate::types::{LabeledPointCloud, Pose};
use crate::viewpoints::render_viewpoint;

pub const GROUND: u8 = 1;
pub const ROAD: u8 = 2;
pub const BUILDING: u8 = 3;
pub const TREE: u8 = 4;
pub const POLE: u8 = 5;

/// Sensor height above the ground plane, meters.
pub const SENSOR_HEIGHT: f64 = 1.73;
const GROUND_HALF_EXTENT: f64 = 40.0;
pub const DEFAULT_DENSITY: f64 = 8.0;

/// Appearance of each class in the three color-like query channels.
pub fn class_color(class: u8) -> [f64; 3] {
    match class {
        GROUND => [0.8, 0.2, -0.8],
        ROAD => [-0.8, -0.8, -0.6],
        BUILDING => [0.8, -0.8, 0.6],
        TREE => [-0.8, 0.8, -0.2],
        POLE => [0.1, 0.3, 0.9],
        _ => [0.0; 3],
    }
}

/// Axis-aligned rectangle on the horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]).max(0.0) * (self.max[1] - self.min[1]).max(0.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }

    pub fn intersect(&self, o: &Rect) -> Rect {
        Rect {
            min: [self.min[0].max(o.min[0]), self.min[1].max(o.min[1])],
            max: [self.max[0].min(o.max[0]), self.max[1].min(o.max[1])],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Horizontal rectangle at height `z` with up to two rectangular holes.
    Plane { rect: Rect, z: f64, holes: Vec<Rect> },
    /// Box standing on `base_z`: side faces and roof.
    Box {
        center: [f64; 2],
        half: [f64; 2],
        yaw: f64,
        base_z: f64,
        height: f64,
    },
    /// Vertical cylinder: side surface and top disk.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        base_z: f64,
        height: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub class: u8,
}

impl Primitive {
    /// Sampled surface patches as `(area, sampler)` pairs.
    fn faces(&self) -> Vec<Face> {
        match &self.shape {
            Shape::Plane { rect, z, holes } => vec![Face::Plane {
                rect: *rect,
                z: *z,
                holes: holes.clone(),
            }],
            Shape::Box {
                center,
                half,
                yaw,
                base_z,
                height,
            } => {
                let mut f = Vec::with_capacity(5);
                for (axis, sign) in [(0usize, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)] {
                    f.push(Face::BoxSide {
                        center: *center,
                        half: *half,
                        yaw: *yaw,
                        base_z: *base_z,
                        height: *height,
                        axis,
                        sign,
                    });
                }
                f.push(Face::BoxTop {
                    center: *center,
                    half: *half,
                    yaw: *yaw,
                    z: base_z + height,
                });
                f
            }
            Shape::Cylinder {
                center,
                radius,
                base_z,
                height,
            } => vec![
                Face::CylSide {
                    center: *center,
                    radius: *radius,
                    base_z: *base_z,
                    height: *height,
                },
                Face::Disk {
                    center: *center,
                    radius: *radius,
                    z: base_z + height,
                },
            ],
        }
    }

    pub fn area(&self) -> f64 {
        self.faces().iter().map(Face::area).sum()
    }

    /// Distance from a local point to this primitive's sampled surface.
    pub fn surface_residual(&self, p: &Vector3<f64>) -> f64 {
        self.faces()
            .iter()
            .map(|f| f.residual(p))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone)]
enum Face {
    Plane {
        rect: Rect,
        z: f64,
        holes: Vec<Rect>,
    },
    BoxSide {
        center: [f64; 2],
        half: [f64; 2],
        yaw: f64,
        base_z: f64,
        height: f64,
        axis: usize,
        sign: f64,
    },
    BoxTop {
        center: [f64; 2],
        half: [f64; 2],
        yaw: f64,
        z: f64,
    },
    CylSide {
        center: [f64; 2],
        radius: f64,
        base_z: f64,
        height: f64,
    },
    Disk {
        center: [f64; 2],
        radius: f64,
        z: f64,
    },
}

fn rotate(yaw: f64, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// Point in the box's rotated footprint frame.
fn footprint_coords(center: &[f64; 2], yaw: f64, p: &Vector3<f64>) -> (f64, f64) {
    rotate(-yaw, p.x - center[0], p.y - center[1])
}

impl Face {
    fn area(&self) -> f64 {
        match self {
            Face::Plane { rect, holes, .. } => {
                let mut a = rect.area();
                let clipped: Vec<Rect> = holes.iter().map(|h| h.intersect(rect)).collect();
                a -= clipped.iter().map(Rect::area).sum::<f64>();
                if clipped.len() == 2 {
                    a += clipped[0].intersect(&clipped[1]).area();
                }
                a
            }
            Face::BoxSide {
                half, height, axis, ..
            } => 2.0 * half[1 - axis] * height,
            Face::BoxTop { half, .. } => 4.0 * half[0] * half[1],
            Face::CylSide { radius, height, .. } => 2.0 * PI * radius * height,
            Face::Disk { radius, .. } => PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut Rng) -> Vector3<f64> {
        match self {
            Face::Plane { rect, z, holes } => loop {
                let x = rng.random_range(rect.min[0]..=rect.max[0]);
                let y = rng.random_range(rect.min[1]..=rect.max[1]);
                if !holes.iter().any(|h| h.contains(x, y)) {
                    return Vector3::new(x, y, *z);
                }
            },
            Face::BoxSide {
                center,
                half,
                yaw,
                base_z,
                height,
                axis,
                sign,
            } => {
                let t = rng.random_range(-1.0..=1.0) * half[1 - axis];
                let z = base_z + rng.random_range(0.0..=*height);
                let (lx, ly) = if *axis == 0 {
                    (sign * half[0], t)
                } else {
                    (t, sign * half[1])
                };
                let (x, y) = rotate(*yaw, lx, ly);
                Vector3::new(center[0] + x, center[1] + y, z)
            }
            Face::BoxTop { center, half, yaw, z } => {
                let lx = rng.random_range(-half[0]..=half[0]);
                let ly = rng.random_range(-half[1]..=half[1]);
                let (x, y) = rotate(*yaw, lx, ly);
                Vector3::new(center[0] + x, center[1] + y, *z)
            }
            Face::CylSide {
                center,
                radius,
                base_z,
                height,
            } => {
                let a = rng.random_range(0.0..2.0 * PI);
                let z = base_z + rng.random_range(0.0..=*height);
                Vector3::new(center[0] + radius * a.cos(), center[1] + radius * a.sin(), z)
            }
            Face::Disk { center, radius, z } => {
                let a = rng.random_range(0.0..2.0 * PI);
                let r = radius * rng.random_range(0.0..=1.0f64).sqrt();
                Vector3::new(center[0] + r * a.cos(), center[1] + r * a.sin(), *z)
            }
        }
    }

    fn residual(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Face::Plane { rect, z, .. } => {
                let dx = (rect.min[0] - p.x).max(p.x - rect.max[0]).max(0.0);
                let dy = (rect.min[1] - p.y).max(p.y - rect.max[1]).max(0.0);
                (dx * dx + dy * dy + (p.z - z).powi(2)).sqrt()
            }
            Face::BoxSide {
                center,
                half,
                yaw,
                base_z,
                height,
                axis,
                sign,
            } => {
                let (lx, ly) = footprint_coords(center, *yaw, p);
                let (n, t) = if *axis == 0 { (lx, ly) } else { (ly, lx) };
                let off = (n - sign * half[*axis]).abs();
                let dt = (t.abs() - half[1 - axis]).max(0.0);
                let dz = (base_z - p.z).max(p.z - base_z - height).max(0.0);
                (off * off + dt * dt + dz * dz).sqrt()
            }
            Face::BoxTop { center, half, yaw, z } => {
                let (lx, ly) = footprint_coords(center, *yaw, p);
                let dx = (lx.abs() - half[0]).max(0.0);
                let dy = (ly.abs() - half[1]).max(0.0);
                (dx * dx + dy * dy + (p.z - z).powi(2)).sqrt()
            }
            Face::CylSide {
                center,
                radius,
                base_z,
                height,
            } => {
                let r = (p.x - center[0]).hypot(p.y - center[1]);
                let dz = (base_z - p.z).max(p.z - base_z - height).max(0.0);
                ((r - radius).powi(2) + dz * dz).sqrt()
            }
            Face::Disk { center, radius, z } => {
                let r = (p.x - center[0]).hypot(p.y - center[1]);
                let dr = (r - radius).max(0.0);
                (dr * dr + (p.z - z).powi(2)).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPlace {
    pub place_id: u32,
    /// World position of the place anchor (sensor origin), meters.
    pub position: [f64; 3],
    pub scene_seed: u64,
    /// Scene in the place's local frame (sensor at the origin).
    pub primitives: Vec<Primitive>,
}

impl SyntheticPlace {
    pub fn anchor(&self) -> Pose {
        Pose::from_yaw(0.0, Vector3::from(self.position))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub places: Vec<SyntheticPlace>,
}

impl SyntheticWorld {
    pub fn place(&self, place_id: u32) -> Result<&SyntheticPlace> {
        self.places
            .iter()
            .find(|p| p.place_id == place_id)
            .ok_or_else(|| Error::InvalidInput(format!("no place {place_id}")))
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.places.iter().enumerate() {
            for b in &self.places[i + 1..] {
                let d = (a.position[0] - b.position[0]).hypot(a.position[1] - b.position[1]);
                best = best.min(d);
            }
        }
        best
    }
}

/// Places on a jittered grid, far enough apart that ground truth is
/// unambiguous and scenes never overlap within the render radius.
fn place_positions(n: usize, cfg: &Config, rng: &mut Rng) -> Vec<[f64; 3]> {
    let spacing = (2.5 * cfg.max_range_m).max(4.0 * cfg.match_threshold_m);
    let jitter = 0.1 * spacing;
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (0..n)
        .map(|i| {
            if i == 0 {
                return [0.0; 3];
            }
            let (r, c) = (i / cols, i % cols);
            [
                c as f64 * spacing + rng.random_range(-jitter..jitter),
                r as f64 * spacing + rng.random_range(-jitter..jitter),
                0.0,
            ]
        })
        .collect()
}

/// Horizontal footprint of a primitive, if it has one worth keeping clear.
fn footprint(shape: &Shape) -> Option<Rect> {
    match shape {
        Shape::Box { center, half, yaw, .. } => {
            let (c, s) = (yaw.cos().abs(), yaw.sin().abs());
            let (hx, hy) = (c * half[0] + s * half[1], s * half[0] + c * half[1]);
            Some(Rect {
                min: [center[0] - hx, center[1] - hy],
                max: [center[0] + hx, center[1] + hy],
            })
        }
        Shape::Cylinder { center, radius, .. } => Some(Rect {
            min: [center[0] - radius, center[1] - radius],
            max: [center[0] + radius, center[1] + radius],
        }),
        Shape::Plane { .. } => None,
    }
}

fn grow(r: &Rect, margin: f64) -> Rect {
    Rect {
        min: [r.min[0] - margin, r.min[1] - margin],
        max: [r.max[0] + margin, r.max[1] + margin],
    }
}

/// A street scene around the sensor: the sensor stands on a road, optionally
/// crossed by a second one; building rows, tree rows and pole lines follow
/// the roads. Setbacks, heights, spacings and which sides are built up are
/// drawn per place.
fn scene(seed: u64) -> Vec<Primitive> {
    let mut rng = stream_rng(seed, 0x5ce);
    let ground_z = -SENSOR_HEIGHT;
    let h = GROUND_HALF_EXTENT;

    // Roads as (along_x, offset, width).
    let main_x = rng.random_bool(0.5);
    let mut roads = vec![(main_x, rng.random_range(-2.0..2.0), rng.random_range(6.0..12.0))];
    if rng.random_bool(0.5) {
        let off = rng.random_range(12.0..30.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        roads.push((!main_x, off, rng.random_range(5.0..10.0)));
    }
    let road_rects: Vec<Rect> = roads
        .iter()
        .map(|&(along_x, off, w)| {
            if along_x {
                Rect { min: [-h, off - w / 2.0], max: [h, off + w / 2.0] }
            } else {
                Rect { min: [off - w / 2.0, -h], max: [off + w / 2.0, h] }
            }
        })
        .collect();
    let mut prims = vec![Primitive {
        shape: Shape::Plane {
            rect: Rect { min: [-h, -h], max: [h, h] },
            z: ground_z,
            holes: road_rects.clone(),
        },
        class: GROUND,
    }];
    for r in &road_rects {
        prims.push(Primitive {
            shape: Shape::Plane { rect: *r, z: ground_z, holes: vec![] },
            class: ROAD,
        });
    }

    let setback = rng.random_range(4.0..18.0);
    let height = rng.random_range(5.0..24.0);
    let depth = rng.random_range(6.0..14.0);
    let coverage = rng.random_range(0.2..0.95);
    let seg_len = rng.random_range(8.0..30.0);
    let tree_spacing = rng.random_bool(0.7).then(|| rng.random_range(5.0..14.0));
    let tree_height = rng.random_range(3.0..9.0);
    let tree_radius = rng.random_range(0.7..2.0);
    let pole_spacing = rng.random_bool(0.7).then(|| rng.random_range(8.0..25.0));
    let pole_height = rng.random_range(4.0..8.0);

    let mut occupied: Vec<Rect> = Vec::new();
    let sensor_zone = Rect { min: [-3.0, -3.0], max: [3.0, 3.0] };
    let try_add = |prims: &mut Vec<Primitive>, occupied: &mut Vec<Rect>, prim: Primitive| {
        let fp = footprint(&prim.shape).expect("solid primitive");
        let clear = |o: &Rect| fp.intersect(o).area() <= 0.0;
        if clear(&sensor_zone) && road_rects.iter().all(|r| clear(r)) && occupied.iter().all(|o| clear(&grow(o, 0.5))) {
            occupied.push(fp);
            prims.push(prim);
        }
    };
    // Local street frame: `u` along the road, `v` across it.
    let to_xy = |along_x: bool, u: f64, v: f64| if along_x { [u, v] } else { [v, u] };
    for &(along_x, off, w) in &roads {
        for side in [-1.0, 1.0] {
            let built = rng.random_bool(0.8);
            let edge = off + side * w / 2.0;
            if built {
                let mut u = -h + rng.random_range(0.0..seg_len);
                while u < h {
                    let len = seg_len * rng.random_range(0.6..1.4);
                    if rng.random_bool(coverage) {
                        let d = depth * rng.random_range(0.8..1.2);
                        let v = edge + side * (setback + d / 2.0);
                        let half = if along_x { [len / 2.0 - 0.5, d / 2.0] } else { [d / 2.0, len / 2.0 - 0.5] };
                        try_add(&mut prims, &mut occupied, Primitive {
                            shape: Shape::Box {
                                center: to_xy(along_x, u + len / 2.0, v),
                                half,
                                yaw: 0.0,
                                base_z: ground_z,
                                height: height * rng.random_range(0.7..1.3),
                            },
                            class: BUILDING,
                        });
                    }
                    u += len;
                }
            }
            if let Some(spacing) = tree_spacing {
                let v = edge + side * rng.random_range(1.5..setback.max(2.0));
                let mut u = -h + rng.random_range(0.0..spacing);
                while u < h {
                    try_add(&mut prims, &mut occupied, Primitive {
                        shape: Shape::Cylinder {
                            center: to_xy(along_x, u, v),
                            radius: tree_radius * rng.random_range(0.8..1.2),
                            base_z: ground_z,
                            height: tree_height * rng.random_range(0.8..1.2),
                        },
                        class: TREE,
                    });
                    u += spacing * rng.random_range(0.8..1.2);
                }
            }
            if let Some(spacing) = pole_spacing {
                let v = edge + side * 0.8;
                let mut u = -h + rng.random_range(0.0..spacing);
                while u < h {
                    try_add(&mut prims, &mut occupied, Primitive {
                        shape: Shape::Cylinder {
                            center: to_xy(along_x, u, v),
                            radius: 0.15,
                            base_z: ground_z,
                            height: pole_height,
                        },
                        class: POLE,
                    });
                    u += spacing;
                }
            }
        }
    }
    prims
}

/// `n_places` seeded places; place 0 sits at the origin.
pub fn generate_world(n_places: usize, rng: &mut Rng, cfg: &Config) -> Result<SyntheticWorld> {
    if n_places == 0 {
        return Err(Error::InvalidInput("n_places must be at least 1".into()));
    }
    let positions = place_positions(n_places, cfg, rng);
    let places = positions
        .into_iter()
        .enumerate()
        .map(|(i, position)| {
            let scene_seed: u64 = rng.random();
            SyntheticPlace {
                place_id: i as u32,
                position,
                scene_seed,
                primitives: scene(scene_seed),
            }
        })
        .collect();
    Ok(SyntheticWorld { places })
}

/// Class swap applied to the twin of each aliased pair.
pub fn alias_class(class: u8) -> u8 {
    match class {
        GROUND => ROAD,
        ROAD => GROUND,
        BUILDING => TREE,
        TREE => BUILDING,
        other => other,
    }
}

/// Like [`generate_world`], but places come in pairs `(2i, 2i + 1)` with
/// identical geometry and swapped semantics (see [`alias_class`]).
pub fn generate_aliased_world(n_places: usize, rng: &mut Rng, cfg: &Config) -> Result<SyntheticWorld> {
    let mut world = generate_world(n_places, rng, cfg)?;
    for i in (1..world.places.len()).step_by(2) {
        let twin = world.places[i - 1].primitives.clone();
        let seed = world.places[i - 1].scene_seed;
        let p = &mut world.places[i];
        p.scene_seed = seed;
        p.primitives = twin
            .into_iter()
            .map(|mut prim| {
                prim.class = alias_class(prim.class);
                prim
            })
            .collect();
    }
    Ok(world)
}

/// Surface samples of every primitive of a place, in world coordinates.
pub fn sample_cloud(
    world: &SyntheticWorld,
    place_id: u32,
    density: f64,
    rng: &mut Rng,
) -> Result<LabeledPointCloud> {
    let place = world.place(place_id)?;
    sample_primitives(&place.primitives, Vector3::from(place.position), density, rng)
}

pub fn sample_primitives(
    primitives: &[Primitive],
    offset: Vector3<f64>,
    density: f64,
    rng: &mut Rng,
) -> Result<LabeledPointCloud> {
    if !(density >= 0.0 && density.is_finite()) {
        return Err(Error::InvalidInput(format!("density {density}")));
    }
    let mut cloud = LabeledPointCloud::empty();
    for prim in primitives {
        for face in prim.faces() {
            let n = (face.area() * density).round() as usize;
            for _ in 0..n {
                cloud.points.push(face.sample(rng) + offset);
                cloud.labels.push(prim.class);
            }
        }
    }
    Ok(cloud)
}

/// Normalizes a heading into [0, 2pi), snapped to 1e-9 rad so that headings
/// differing by whole turns render identically.
pub fn normalize_heading(heading: f64) -> f64 {
    let h = heading.rem_euclid(2.0 * PI);
    let snapped = (h * 1e9).round() / 1e9;
    if snapped >= 2.0 * PI {
        0.0
    } else {
        snapped
    }
}

/// Renders the frontal camera window from a place at `heading` (relative to
/// the place anchor). Raw channels: normalized depth, normal, and the class
/// appearance plus `noise_level`-scaled Gaussian noise. Returns the
/// observation and the ground-truth position.
pub fn make_query(
    world: &SyntheticWorld,
    place_id: u32,
    map_cloud: &LabeledPointCloud,
    heading: f64,
    noise_level: f64,
    rng: &mut Rng,
    cfg: &Config,
) -> Result<(QueryObservation, [f64; 3])> {
    let place = world.place(place_id)?;
    let pose = place
        .anchor()
        .compose(&Pose::from_yaw(normalize_heading(heading), Vector3::zeros()));
    let (range, sem) = render_viewpoint(map_cloud, &pose, cfg);
    Ok((
        observation_from_render(&range, &sem, noise_level, rng, cfg),
        place.position,
    ))
}

/// Builds a query observation from the frontal window of a full render.
pub fn observation_from_render(
    range: &crate::projection::RangeImage,
    sem: &crate::projection::SemanticImage,
    noise_level: f64,
    rng: &mut Rng,
    cfg: &Config,
) -> QueryObservation {
    let (start, w) = (cfg.frustum_start(), cfg.frustum_cols());
    let range = range.crop_columns(start, w);
    let gt = sem.crop_columns(start, w);
    let ch = crate::config::QUERY_CHANNELS;
    let cells = range.rows * w;
    let mut raw = vec![0.0; cells * ch];
    let mut mask = vec![false; cells];
    for i in 0..cells {
        if range.depth[i] <= 0.0 {
            continue;
        }
        mask[i] = true;
        let x = &mut raw[i * ch..(i + 1) * ch];
        x[0] = (range.depth[i] / cfg.max_range_m).clamp(0.0, 1.0);
        x[1..4].copy_from_slice(&range.normals[i]);
        let color = class_color(gt.labels[i]);
        for j in 0..3 {
            let n: f64 = rng.sample(StandardNormal);
            x[4 + j] = color[j] + noise_level * n;
        }
    }
    QueryObservation {
        rows: range.rows,
        cols: w,
        channels: ch,
        raw,
        mask,
        gt_labels: gt,
    }
}
