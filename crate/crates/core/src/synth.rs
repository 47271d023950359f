//! Procedural chairs built from axis-aligned boxes with analytically known
//! part contacts.
//!
//! Parts: back = 0, seat = 1, legs = 2 (four boxes), armrest = 3 (one bar per
//! side plus optional support posts). The seat-back and seat-leg contacts are
//! always present; the digits of a structure code list the parts the armrest
//! touches, with `Ch_012` meaning no armrest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetManifest, ShapeRecord, Split};
use crate::diff::rng::{seeded_rng, SeededRng};
use crate::error::{Error, Result};
use crate::shape::{normalize_cloud, PointCloud};
use crate::structure::{adjacency_from_edges, adjacency_from_parts, StructureGraph, DEFAULT_ADJACENCY_THRESHOLD};

pub const CHAIR_PARTS: usize = 4;
pub const BACK: usize = 0;
pub const SEAT: usize = 1;
pub const LEG: usize = 2;
pub const ARMREST: usize = 3;

/// Touching primitives are closer than this before normalization.
pub const CONTACT_EPSILON: f64 = 0.01;
/// Non-touching parts are at least this far apart before normalization.
pub const MIN_SEPARATION: f64 = 4.0 * CONTACT_EPSILON;
pub const MAX_ATTEMPTS: usize = 100;

pub const CATALOG_CODES: [&str; 8] = ["Ch_012", "Ch_03", "Ch_13", "Ch_23", "Ch_013", "Ch_023", "Ch_123", "Ch_0123"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub code: &'static str,
    pub existence: Vec<bool>,
    pub adjacency: Vec<bool>,
}

impl CatalogEntry {
    /// Parts the armrest touches, empty without an armrest.
    pub fn armrest_contacts(&self) -> Vec<usize> {
        (0..ARMREST).filter(|&k| self.adjacency[ARMREST * CHAIR_PARTS + k]).collect()
    }
}

pub fn structure_catalog() -> Vec<CatalogEntry> {
    CATALOG_CODES
        .iter()
        .map(|&code| {
            let mut edges = vec![(BACK, SEAT), (SEAT, LEG)];
            let existence = if code == "Ch_012" {
                vec![true, true, true, false]
            } else {
                for c in code["Ch_".len()..].chars().filter(|&c| c != '3') {
                    edges.push((c.to_digit(10).expect("catalog digit") as usize, ARMREST));
                }
                vec![true; CHAIR_PARTS]
            };
            CatalogEntry { code, existence, adjacency: adjacency_from_edges(CHAIR_PARTS, &edges) }
        })
        .collect()
}

pub fn catalog_entry(code: &str) -> Result<CatalogEntry> {
    structure_catalog()
        .into_iter()
        .find(|e| e.code == code)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown structure code `{code}`")))
}

/// Catalog code whose V and E match exactly, if any.
pub fn code_for(existence: &[bool], adjacency: &[bool]) -> Option<&'static str> {
    structure_catalog().into_iter().find(|e| e.existence == existence && e.adjacency == adjacency).map(|e| e.code)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartPrimitive {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    pub part_index: usize,
}

impl PartPrimitive {
    fn from_bounds(lo: [f64; 3], hi: [f64; 3], part_index: usize) -> Self {
        PartPrimitive {
            center: [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k])),
            half_extents: [0, 1, 2].map(|k| 0.5 * (hi[k] - lo[k])),
            part_index,
        }
    }

    pub fn area(&self) -> f64 {
        let [a, b, c] = self.half_extents;
        8.0 * (a * b + b * c + a * c)
    }

    /// Euclidean distance between two solid boxes.
    pub fn distance(&self, other: &PartPrimitive) -> f64 {
        (0..3)
            .map(|k| ((self.center[k] - other.center[k]).abs() - self.half_extents[k] - other.half_extents[k]).max(0.0).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn sample_surface(&self, rng: &mut SeededRng) -> [f64; 3] {
        let [a, b, c] = self.half_extents;
        // face pairs normal to x, y, z
        let w = [b * c, a * c, a * b];
        let mut u = rng.uniform() * (w[0] + w[1] + w[2]);
        let mut axis = 2;
        for (k, wk) in w.iter().enumerate() {
            if u < *wk {
                axis = k;
                break;
            }
            u -= wk;
        }
        let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = if k == axis { self.center[k] + side * self.half_extents[k] } else { self.center[k] + self.half_extents[k] * rng.uniform_in(-1.0, 1.0) };
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DimensionRanges {
    pub seat_width: Range,
    pub seat_depth: Range,
    pub seat_thickness: Range,
    pub back_height: Range,
    pub back_thickness: Range,
    pub leg_height: Range,
    pub leg_thickness: Range,
    pub leg_inset: Range,
    pub armrest_height: Range,
    pub armrest_offset: Range,
}

impl Default for DimensionRanges {
    fn default() -> Self {
        DimensionRanges {
            seat_width: Range::new(0.40, 0.60),
            seat_depth: Range::new(0.40, 0.55),
            seat_thickness: Range::new(0.04, 0.08),
            back_height: Range::new(0.40, 0.60),
            back_thickness: Range::new(0.03, 0.06),
            leg_height: Range::new(0.35, 0.50),
            leg_thickness: Range::new(0.03, 0.06),
            leg_inset: Range::new(0.05, 0.08),
            armrest_height: Range::new(0.15, 0.28),
            armrest_offset: Range::new(0.05, 0.10),
        }
    }
}

/// Armrest bar and post cross-section.
const ARM_BAR: f64 = 0.05;
const ARM_POST: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairSpec {
    pub structure_code: String,
    pub seat_width: f64,
    pub seat_depth: f64,
    pub seat_thickness: f64,
    pub back_height: f64,
    pub back_thickness: f64,
    pub leg_height: f64,
    pub leg_thickness: f64,
    pub leg_inset: f64,
    pub armrest_height: f64,
    pub armrest_offset: f64,
}

impl ChairSpec {
    pub fn sample(code: &str, ranges: &DimensionRanges, rng: &mut SeededRng) -> Result<Self> {
        catalog_entry(code)?;
        let mut draw = |r: Range| rng.uniform_in(r.lo, r.hi);
        Ok(ChairSpec {
            structure_code: code.to_string(),
            seat_width: draw(ranges.seat_width),
            seat_depth: draw(ranges.seat_depth),
            seat_thickness: draw(ranges.seat_thickness),
            back_height: draw(ranges.back_height),
            back_thickness: draw(ranges.back_thickness),
            leg_height: draw(ranges.leg_height),
            leg_thickness: draw(ranges.leg_thickness),
            leg_inset: draw(ranges.leg_inset),
            armrest_height: draw(ranges.armrest_height),
            armrest_offset: draw(ranges.armrest_offset),
        })
    }

    pub fn check_ranges(&self, r: &DimensionRanges) -> Result<()> {
        let fields = [
            ("seat_width", self.seat_width, r.seat_width),
            ("seat_depth", self.seat_depth, r.seat_depth),
            ("seat_thickness", self.seat_thickness, r.seat_thickness),
            ("back_height", self.back_height, r.back_height),
            ("back_thickness", self.back_thickness, r.back_thickness),
            ("leg_height", self.leg_height, r.leg_height),
            ("leg_thickness", self.leg_thickness, r.leg_thickness),
            ("leg_inset", self.leg_inset, r.leg_inset),
            ("armrest_height", self.armrest_height, r.armrest_height),
            ("armrest_offset", self.armrest_offset, r.armrest_offset),
        ];
        for (name, v, range) in fields {
            if !range.contains(v) {
                return Err(Error::InvalidConfig(format!("{name}={v} outside [{}, {}]", range.lo, range.hi)));
            }
        }
        Ok(())
    }

    /// Boxes plus one shared contact point per touching part pair. y is up,
    /// the back sits at negative z.
    pub fn realize(&self) -> Result<(Vec<PartPrimitive>, Vec<(usize, usize, [f64; 3])>)> {
        let entry = catalog_entry(&self.structure_code)?;
        let (hw, hd) = (0.5 * self.seat_width, 0.5 * self.seat_depth);
        let (lh, st) = (self.leg_height, self.seat_thickness);
        let seat_top = lh + st;
        let mut prims = Vec::new();
        let mut contacts = Vec::new();

        prims.push(PartPrimitive::from_bounds([-hw, lh, -hd], [hw, seat_top, hd], SEAT));
        let back_top = seat_top + self.back_height;
        prims.push(PartPrimitive::from_bounds([-hw, lh, -hd - self.back_thickness], [hw, back_top, -hd], BACK));
        contacts.push((BACK, SEAT, [0.0, lh + 0.5 * st, -hd]));

        let (inset, lt) = (self.leg_inset, self.leg_thickness);
        let front_z = [hd - inset - lt, hd - inset];
        for sx in [-1.0, 1.0] {
            for z in [[-hd + inset, -hd + inset + lt], front_z] {
                let xs = [sx * (hw - inset), sx * (hw - inset - lt)];
                prims.push(PartPrimitive::from_bounds([xs[0].min(xs[1]), 0.0, z[0]], [xs[0].max(xs[1]), lh, z[1]], LEG));
            }
        }
        let leg0 = prims.last().expect("legs pushed").center;
        contacts.push((SEAT, LEG, [leg0[0], lh, leg0[2]]));

        let touches = entry.armrest_contacts();
        if entry.existence[ARMREST] {
            let off = self.armrest_offset;
            let bar_lo = seat_top + self.armrest_height;
            let bar_hi = bar_lo + ARM_BAR;
            if bar_hi >= back_top - MIN_SEPARATION {
                return Err(Error::GeometryInfeasible("armrest reaches above the back".into()));
            }
            let to_back = touches.contains(&BACK);
            let to_seat = touches.contains(&SEAT);
            let to_leg = touches.contains(&LEG);
            let z0 = if to_back { -hd } else { -hd + off };
            let z1 = hd - inset;
            for sx in [-1.0f64, 1.0] {
                let mirror = |lo: [f64; 3], hi: [f64; 3]| {
                    let (a, b) = (sx * lo[0], sx * hi[0]);
                    PartPrimitive::from_bounds([a.min(b), lo[1], lo[2]], [a.max(b), hi[1], hi[2]], ARMREST)
                };
                let outer = if to_leg { hw + off + ARM_POST } else { hw };
                prims.push(mirror([hw - ARM_BAR, bar_lo, z0], [outer, bar_hi, z1]));
                if to_seat {
                    prims.push(mirror([hw - ARM_POST, seat_top, z1 - ARM_POST], [hw, bar_lo, z1]));
                }
                if to_leg {
                    let conn_lo = 0.5 * lh - 0.5 * ARM_POST;
                    prims.push(mirror([hw + off, conn_lo, front_z[0]], [hw + off + ARM_POST, bar_lo, front_z[1]]));
                    prims.push(mirror([hw - inset, conn_lo, front_z[0]], [hw + off + ARM_POST, conn_lo + ARM_POST, front_z[1]]));
                }
            }
            if to_back {
                contacts.push((BACK, ARMREST, [hw - 0.5 * ARM_BAR, 0.5 * (bar_lo + bar_hi), -hd]));
            }
            if to_seat {
                contacts.push((SEAT, ARMREST, [hw - 0.5 * ARM_POST, seat_top, z1 - 0.5 * ARM_POST]));
            }
            if to_leg {
                contacts.push((LEG, ARMREST, [hw - inset, 0.5 * lh, 0.5 * (front_z[0] + front_z[1])]));
            }
        }
        check_contacts(&prims, &entry.adjacency)?;
        Ok((prims, contacts))
    }
}

/// Part-level minimum box distance must be below the contact epsilon exactly
/// for the catalog edges and at least the separation elsewhere.
fn check_contacts(prims: &[PartPrimitive], adjacency: &[bool]) -> Result<()> {
    for j in 0..CHAIR_PARTS {
        for k in j + 1..CHAIR_PARTS {
            let d = prims
                .iter()
                .filter(|a| a.part_index == j)
                .flat_map(|a| prims.iter().filter(|b| b.part_index == k).map(move |b| a.distance(b)))
                .fold(f64::INFINITY, f64::min);
            if !d.is_finite() {
                continue;
            }
            let want = adjacency[j * CHAIR_PARTS + k];
            if (want && d >= CONTACT_EPSILON) || (!want && d < MIN_SEPARATION) {
                return Err(Error::GeometryInfeasible(format!("parts {j} and {k} at distance {d:.4}, adjacency {want}")));
            }
        }
    }
    Ok(())
}

/// Largest-remainder allocation proportional to `weights`, at least one per
/// positive weight.
fn allocate(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quota: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quota[b] - quota[b].floor()).total_cmp(&(quota[a] - quota[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &j in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if weights[j] > 0.0 {
            counts[j] += 1;
            left -= 1;
        }
    }
    for j in 0..weights.len() {
        if weights[j] > 0.0 && counts[j] == 0 {
            let donor = (0..counts.len()).max_by_key(|&k| (counts[k], usize::MAX - k)).expect("non-empty");
            counts[donor] -= 1;
            counts[j] = 1;
        }
    }
    counts
}

/// Samples `n` surface points, normalizes them and checks that the realized
/// adjacency equals the catalog graph.
pub fn make_shape(spec: &ChairSpec, n: usize, noise_sigma: f64, seed: u64) -> Result<ShapeRecord> {
    if n < CHAIR_PARTS {
        return Err(Error::InvalidConfig(format!("n={n} is below the part count")));
    }
    let entry = catalog_entry(&spec.structure_code)?;
    let (prims, contacts) = spec.realize()?;
    let mut rng = seeded_rng(seed);
    let areas: Vec<f64> = (0..CHAIR_PARTS).map(|j| prims.iter().filter(|p| p.part_index == j).map(|p| p.area()).sum()).collect();
    let counts = allocate(n, &areas);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (j, &count) in counts.iter().enumerate() {
        let own: Vec<&PartPrimitive> = prims.iter().filter(|p| p.part_index == j).collect();
        let mut seeded: Vec<[f64; 3]> = contacts.iter().filter(|c| c.0 == j || c.1 == j).map(|c| c.2).collect();
        seeded.truncate(count);
        let part_area: f64 = own.iter().map(|p| p.area()).sum();
        for k in 0..count {
            let p = if k < seeded.len() {
                seeded[k]
            } else {
                let mut u = rng.uniform() * part_area;
                let mut pick = own[own.len() - 1];
                for p in &own {
                    if u < p.area() {
                        pick = p;
                        break;
                    }
                    u -= p.area();
                }
                pick.sample_surface(&mut rng)
            };
            points.push(p);
            labels.push(j);
        }
    }
    if noise_sigma > 0.0 {
        for p in &mut points {
            for c in p.iter_mut() {
                *c += noise_sigma * rng.normal();
            }
        }
    }
    let cloud = normalize_cloud(&PointCloud::from_f64(&points)?)?;
    let realized = adjacency_from_parts(&cloud, &labels, CHAIR_PARTS, DEFAULT_ADJACENCY_THRESHOLD);
    if realized != entry.adjacency {
        return Err(Error::GeometryInfeasible(format!("{}: realized adjacency differs from the catalog", spec.structure_code)));
    }
    let graph = StructureGraph::from_indices(&labels, entry.existence.clone(), entry.adjacency.clone())?;
    let record = ShapeRecord { shape_id: String::new(), structure_code: spec.structure_code.clone(), cloud, graph };
    record.validate()?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n: usize,
    pub count_per_code: usize,
    pub codes: Vec<String>,
    pub ranges: DimensionRanges,
    pub noise_sigma: f64,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n: 512,
            count_per_code: 25,
            codes: CATALOG_CODES.iter().map(|s| s.to_string()).collect(),
            ranges: DimensionRanges::default(),
            noise_sigma: 0.0,
            seed: 0,
            test_fraction: 0.15,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < CHAIR_PARTS {
            return Err(Error::InvalidConfig(format!("n={} is below the part count {CHAIR_PARTS}", self.n)));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidConfig("test_fraction must lie in [0, 1)".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise_sigma must be finite and non-negative".into()));
        }
        for c in &self.codes {
            catalog_entry(c)?;
        }
        Ok(())
    }
}

pub fn shape_id(code: &str, index: usize) -> String {
    format!("{code}-{index:04}")
}

fn id_hash(id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Ranks ids by hash; the lowest-hash `round(fraction * len)` go to test.
pub fn hash_split(ids: &[String], test_fraction: f64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (id_hash(&ids[i]), i));
    let n_test = (test_fraction * ids.len() as f64).round() as usize;
    let mut out = vec![Split::Train; ids.len()];
    for &i in &order[..n_test] {
        out[i] = Split::Test;
    }
    out
}

/// Draws dimensions until the geometry realizes the catalog graph.
pub fn sample_chair(code: &str, config: &GeneratorConfig, rng: &mut SeededRng) -> Result<ShapeRecord> {
    let mut last = None;
    for _ in 0..MAX_ATTEMPTS {
        let spec = ChairSpec::sample(code, &config.ranges, rng)?;
        match make_shape(&spec, config.n, config.noise_sigma, rng.next_u64()) {
            Ok(r) => return Ok(r),
            Err(Error::GeometryInfeasible(why)) => last = Some(why),
            Err(e) => return Err(e),
        }
    }
    Err(Error::GeometryInfeasible(format!("{code}: no feasible geometry in {MAX_ATTEMPTS} attempts ({})", last.unwrap_or_default())))
}

pub fn make_dataset(config: &GeneratorConfig) -> Result<(DatasetManifest, Vec<ShapeRecord>)> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.codes.len() * config.count_per_code);
    for (ci, code) in config.codes.iter().enumerate() {
        for i in 0..config.count_per_code {
            let mut rng = seeded_rng(config.seed ^ (ci as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
            let mut r = sample_chair(code, config, &mut rng)?;
            r.shape_id = shape_id(code, i);
            records.push(r);
        }
    }
    let ids: Vec<String> = records.iter().map(|r| r.shape_id.clone()).collect();
    let mut manifest = DatasetManifest::new("chair", CHAIR_PARTS);
    for (r, s) in records.iter().zip(hash_split(&ids, config.test_fraction)) {
        manifest.push(r, s);
    }
    Ok((manifest, records))
}
