//! Synthetic head-like phantoms: two dark ellipsoidal cavities, each holding a
//! thin bright curved tube whose voxels form the ground-truth mask.
//!
//! Geometry lives in voxel-index space. Each tube follows a circular arc of
//! radius `R` centred on its cavity centre, where `R` leaves a safety margin
//! inside the cavity's smallest semi-axis. Mask voxels are those whose centres
//! lie within the tube radius of the arc, plus the voxels nearest to densely
//! sampled arc points (so thin tubes are never empty or broken).

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::volume::{MaskVolume, Volume};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Half the voxel diagonal: the farthest a point can be from its voxel centre.
const HALF_DIAG: f64 = 0.866_025_403_784_438_6;
/// Clearance between the tube surface and the cavity's inscribed sphere.
const WALL_MARGIN: f64 = 0.5;
/// Arcs never sweep more than this, so the two ends stay apart.
const MAX_SPAN: f64 = 1.5 * PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Small,
    Medium,
    Large,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Small, Stratum::Medium, Stratum::Large];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Small => "small",
            Stratum::Medium => "medium",
            Stratum::Large => "large",
        }
    }
}

/// Arc-length ranges (voxels) of the tubes, per stratum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RibbonLengths {
    pub small: [f64; 2],
    pub medium: [f64; 2],
    pub large: [f64; 2],
}

impl RibbonLengths {
    pub fn get(&self, stratum: Stratum) -> [f64; 2] {
        match stratum {
            Stratum::Small => self.small,
            Stratum::Medium => self.medium,
            Stratum::Large => self.large,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub voxel_size: [f64; 3],
    /// Per-axis lower and upper bounds of the cavity semi-axes.
    pub cavity_radii_min: [f64; 3],
    pub cavity_radii_max: [f64; 3],
    /// Distance between the two cavity centres along axis 1.
    pub cavity_separation: f64,
    /// Each cavity centre is displaced by up to this much per axis.
    pub center_jitter: f64,
    /// Tube radius range; thickness is twice this.
    pub ribbon_radius: [f64; 2],
    pub ribbon_length: RibbonLengths,
    pub tissue_intensity: f64,
    pub cavity_intensity: f64,
    pub ribbon_intensity: f64,
    pub noise_sd: f64,
    /// The bias field is `1 + a·cos(…)`, a smooth planar wave.
    pub bias_amplitude: f64,
    /// Fixed stratum, or `None` to draw one uniformly per phantom.
    pub stratum: Option<Stratum>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [48, 48, 40],
            voxel_size: [1.0; 3],
            cavity_radii_min: [7.0, 6.0, 6.0],
            cavity_radii_max: [9.0, 7.0, 8.0],
            cavity_separation: 20.0,
            center_jitter: 1.5,
            ribbon_radius: [1.0, 1.5],
            ribbon_length: RibbonLengths {
                small: [6.0, 9.0],
                medium: [9.0, 13.0],
                large: [13.0, 17.0],
            },
            tissue_intensity: 0.6,
            cavity_intensity: 0.2,
            ribbon_intensity: 1.0,
            noise_sd: 0.02,
            bias_amplitude: 0.1,
            stratum: None,
        }
    }
}

/// One generated case.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub mask: MaskVolume,
    pub stratum: Stratum,
}

impl PhantomSpec {
    fn effective_radius(&self) -> f64 {
        self.ribbon_radius[1].max(HALF_DIAG)
    }

    /// Arc radius used inside a cavity whose smallest semi-axis is `r_min`.
    fn arc_radius(&self, r_min: f64) -> f64 {
        r_min - self.effective_radius() - WALL_MARGIN
    }

    fn nominal_centers(&self) -> [[f64; 3]; 2] {
        let mid = self.shape.map(|n| (n as f64 - 1.0) / 2.0);
        let half = self.cavity_separation / 2.0;
        [[mid[0], mid[1] - half, mid[2]], [mid[0], mid[1] + half, mid[2]]]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::param(msg));
        if self.shape.contains(&0) {
            return bad(format!("phantom shape must be positive, got {:?}", self.shape));
        }
        if self.voxel_size.iter().any(|v| !(*v > 0.0)) {
            return bad(format!("voxel sizes must be positive, got {:?}", self.voxel_size));
        }
        for a in 0..3 {
            let (lo, hi) = (self.cavity_radii_min[a], self.cavity_radii_max[a]);
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("cavity radius range on axis {a} is invalid: [{lo}, {hi}]"));
            }
        }
        let [rho_lo, rho_hi] = self.ribbon_radius;
        if !(rho_lo > 0.0 && rho_lo <= rho_hi) {
            return bad(format!("ribbon radius range is invalid: [{rho_lo}, {rho_hi}]"));
        }
        for s in Stratum::ALL {
            let [lo, hi] = self.ribbon_length.get(s);
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("{} ribbon length range is invalid: [{lo}, {hi}]", s.name()));
            }
        }
        if !(self.center_jitter >= 0.0) || !(self.cavity_separation >= 0.0) {
            return bad("jitter and separation must be non-negative".into());
        }
        if !(self.noise_sd >= 0.0) {
            return bad(format!("noise sd must be non-negative, got {}", self.noise_sd));
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) {
            return bad(format!("bias amplitude must lie in [0, 1), got {}", self.bias_amplitude));
        }
        let levels = [self.tissue_intensity, self.cavity_intensity, self.ribbon_intensity];
        if levels.iter().any(|v| !v.is_finite())
            || levels[0] == levels[1]
            || levels[0] == levels[2]
            || levels[1] == levels[2]
        {
            return bad(format!("intensities must be finite and distinct, got {levels:?}"));
        }

        // the tube must fit inside the smallest possible cavity without folding
        let r_min = self.cavity_radii_min.iter().cloned().fold(f64::INFINITY, f64::min);
        let arc = self.arc_radius(r_min);
        let outer = self.effective_radius() + HALF_DIAG;
        let longest = Stratum::ALL
            .iter()
            .map(|&s| self.ribbon_length.get(s)[1])
            .fold(0.0, f64::max);
        if arc <= outer || longest > MAX_SPAN * arc {
            return bad(format!(
                "ribbon larger than cavity: radius {rho_hi} and length {longest} do not fit \
                 inside a cavity semi-axis of {r_min}"
            ));
        }

        let j = self.center_jitter;
        for c in self.nominal_centers() {
            for a in 0..3 {
                let reach = self.cavity_radii_max[a] + j;
                if c[a] - reach < 0.0 || c[a] + reach > self.shape[a] as f64 - 1.0 {
                    return bad(format!("cavity does not fit inside the volume along axis {a}"));
                }
            }
        }
        if self.cavity_separation - 2.0 * j <= 2.0 * self.cavity_radii_max[1] {
            return bad("the two cavities may overlap; increase the separation".into());
        }
        Ok(())
    }

    /// Range `(lo, hi)` that the total mask voxel count always falls in for
    /// a stratum: tube volumes of the shrunken and grown tubes.
    pub fn mask_voxel_bounds(&self, stratum: Stratum) -> (f64, f64) {
        let tube = |r: f64, len: f64| PI * r * r * len + 4.0 / 3.0 * PI * r.powi(3);
        let [len_lo, len_hi] = self.ribbon_length.get(stratum);
        let inner = (self.ribbon_radius[0] - HALF_DIAG).max(0.0);
        let outer = self.effective_radius() + HALF_DIAG;
        (2.0 * tube(inner, len_lo).max(1.0), 2.0 * tube(outer, len_hi))
    }
}

struct Arc {
    center: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
    n: [f64; 3],
    radius: f64,
    start: f64,
    span: f64,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalized(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    a.map(|x| x / n)
}

fn random_unit(rng: &mut Rng) -> [f64; 3] {
    loop {
        let p = [(); 3].map(|_| rng.gen_range(-1.0..1.0));
        let n2 = dot(p, p);
        if n2 > 1e-6 && n2 <= 1.0 {
            return normalized(p);
        }
    }
}

impl Arc {
    fn point(&self, theta: f64) -> [f64; 3] {
        let (s, c) = theta.sin_cos();
        [0, 1, 2].map(|i| self.center[i] + self.radius * (c * self.u[i] + s * self.v[i]))
    }

    fn distance(&self, q: [f64; 3]) -> f64 {
        let d = [0, 1, 2].map(|i| q[i] - self.center[i]);
        let (a, b, h) = (dot(d, self.u), dot(d, self.v), dot(d, self.n));
        let rel = (b.atan2(a) - self.start).rem_euclid(2.0 * PI);
        if rel <= self.span {
            let radial = (a * a + b * b).sqrt() - self.radius;
            (radial * radial + h * h).sqrt()
        } else {
            let end = |p: [f64; 3]| {
                let e = [0, 1, 2].map(|i| q[i] - p[i]);
                dot(e, e).sqrt()
            };
            end(self.point(self.start)).min(end(self.point(self.start + self.span)))
        }
    }
}

/// Voxel classes before intensities are assigned.
struct Layout {
    /// 0 tissue, 1 cavity, 2 ribbon.
    label: Vec<u8>,
    /// Ellipsoid membership, kept to check containment in tests.
    #[cfg_attr(not(test), allow(dead_code))]
    in_cavity: Vec<bool>,
    stratum: Stratum,
}

fn layout(spec: &PhantomSpec, rng: &mut Rng) -> Layout {
    let stratum = spec
        .stratum
        .unwrap_or_else(|| Stratum::ALL[rng.gen_range(0..Stratum::ALL.len())]);
    let shape = spec.shape;
    let n: usize = shape.iter().product();
    let index = |i: usize, j: usize, k: usize| (i * shape[1] + j) * shape[2] + k;

    let mut label = vec![0u8; n];
    let mut in_cavity = vec![false; n];
    for nominal in spec.nominal_centers() {
        let j = spec.center_jitter;
        let center = nominal.map(|c| c + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 });
        let radii = [0, 1, 2].map(|a| {
            let (lo, hi) = (spec.cavity_radii_min[a], spec.cavity_radii_max[a]);
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        });
        let draw = |rng: &mut Rng, [lo, hi]: [f64; 2]| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let rho = draw(rng, spec.ribbon_radius);
        let length = draw(rng, spec.ribbon_length.get(stratum));
        let r_min = radii.iter().cloned().fold(f64::INFINITY, f64::min);
        let radius = spec.arc_radius(r_min);
        let u = random_unit(rng);
        let mut w = random_unit(rng);
        while dot(cross(u, w), cross(u, w)) < 1e-3 {
            w = random_unit(rng);
        }
        let n_vec = normalized(cross(u, w));
        let arc = Arc {
            center,
            u,
            v: cross(n_vec, u),
            n: n_vec,
            radius,
            start: rng.gen_range(0.0..2.0 * PI),
            span: length / radius,
        };

        let lo = [0, 1, 2].map(|a| (center[a] - radii[a]).floor().max(0.0) as usize);
        let hi = [0, 1, 2].map(|a| ((center[a] + radii[a]).ceil() as usize).min(shape[a] - 1));
        for i in lo[0]..=hi[0] {
            for jj in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let p = [i as f64, jj as f64, k as f64];
                    let e: f64 = (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum();
                    if e <= 1.0 {
                        let idx = index(i, jj, k);
                        in_cavity[idx] = true;
                        label[idx] = if arc.distance(p) <= rho { 2 } else { 1 };
                    }
                }
            }
        }
        let steps = (length / 0.25).ceil() as usize;
        for s in 0..=steps {
            let p = arc.point(arc.start + arc.span * s as f64 / steps as f64);
            let [i, jj, k] = p.map(|x| x.round() as usize);
            label[index(i, jj, k)] = 2;
        }
    }
    Layout {
        label,
        in_cavity,
        stratum,
    }
}

/// Draws one phantom. Deterministic given `spec` and the generator state.
pub fn generate_phantom(spec: &PhantomSpec, rng: &mut Rng) -> Result<Phantom> {
    spec.validate()?;
    let shape = spec.shape;
    let n: usize = shape.iter().product();
    let Layout { label, stratum, .. } = layout(spec, rng);
    let bias_dir = random_unit(rng);
    let bias_phase = rng.gen_range(0.0..2.0 * PI);
    let wavelength = 2.0 * *shape.iter().max().expect("three axes") as f64;
    let noise = Normal::new(0.0, spec.noise_sd)
        .map_err(|e| Error::param(format!("noise sd: {e}")))?;
    let mut image = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..shape[0] {
        for jj in 0..shape[1] {
            for k in 0..shape[2] {
                let l = label[(i * shape[1] + jj) * shape[2] + k];
                let base = match l {
                    0 => spec.tissue_intensity,
                    1 => spec.cavity_intensity,
                    _ => spec.ribbon_intensity,
                };
                let mut v = base;
                if spec.bias_amplitude > 0.0 {
                    let phase = 2.0 * PI * dot(bias_dir, [i as f64, jj as f64, k as f64]) / wavelength;
                    v *= 1.0 + spec.bias_amplitude * (phase + bias_phase).cos();
                }
                if spec.noise_sd > 0.0 {
                    v += noise.sample(rng);
                }
                image.push(v);
                mask.push(if l == 2 { 1.0 } else { 0.0 });
            }
        }
    }
    let image = Volume::new(shape, image)?.with_voxel_size(spec.voxel_size)?;
    let mask = MaskVolume::new(Volume::new(shape, mask)?.with_voxel_size(spec.voxel_size)?)?;
    Ok(Phantom {
        image,
        mask,
        stratum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn noiseless() -> PhantomSpec {
        PhantomSpec {
            noise_sd: 0.0,
            bias_amplitude: 0.0,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn default_spec_is_valid() {
        PhantomSpec::default().validate().unwrap();
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(&spec, &mut rng::seeded(5)).unwrap();
        let b = generate_phantom(&spec, &mut rng::seeded(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&spec, &mut rng::seeded(6)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn noiseless_image_has_three_levels() {
        let spec = noiseless();
        for seed in 0..5 {
            let p = generate_phantom(&spec, &mut rng::seeded(seed)).unwrap();
            let mut levels: Vec<f64> = p.image.data().to_vec();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            assert_eq!(levels, vec![0.2, 0.6, 1.0]);
            // the mask is exactly the bright voxel set
            for (v, m) in p.image.data().iter().zip(p.mask.data()) {
                assert_eq!(*v == 1.0, *m == 1.0);
            }
        }
    }

    #[test]
    fn mask_lies_inside_cavity() {
        let spec = noiseless();
        for seed in 0..200 {
            let l = layout(&spec, &mut rng::seeded(seed));
            assert!(l.label.iter().any(|&v| v == 2));
            for (v, c) in l.label.iter().zip(&l.in_cavity) {
                assert_eq!(*v > 0, *c, "seed {seed}");
            }
        }
    }

    #[test]
    fn mask_size_within_analytic_bounds() {
        let mut ranges = std::collections::BTreeMap::new();
        for seed in 0..1000u64 {
            let stratum = Stratum::ALL[(seed % 3) as usize];
            let spec = PhantomSpec {
                stratum: Some(stratum),
                ..noiseless()
            };
            let count = layout(&spec, &mut rng::seeded(seed)).label.iter().filter(|&&v| v == 2).count() as f64;
            let (lo, hi) = spec.mask_voxel_bounds(stratum);
            assert!(lo <= count && count <= hi, "seed {seed}: {count} not in [{lo}, {hi}]");
            let r = ranges.entry(stratum).or_insert((f64::INFINITY, 0.0f64));
            *r = (r.0.min(count), r.1.max(count));
        }
        // larger strata produce larger masks on average
        assert!(ranges[&Stratum::Small].0 < ranges[&Stratum::Large].0);
    }

    #[test]
    fn arc_distance_oracle() {
        let arc = Arc {
            center: [0.0; 3],
            u: [1.0, 0.0, 0.0],
            v: [0.0, 1.0, 0.0],
            n: [0.0, 0.0, 1.0],
            radius: 5.0,
            start: 0.0,
            span: PI / 2.0,
        };
        assert!((arc.distance([5.0, 0.0, 2.0]) - 2.0).abs() < 1e-12);
        assert!((arc.distance([0.0, 7.0, 0.0]) - 2.0).abs() < 1e-12);
        // below the start point: nearest is the endpoint (5,0,0)
        assert!((arc.distance([5.0, -3.0, 0.0]) - 3.0).abs() < 1e-12);
        // brute force over dense samples
        let q = [-2.0, 1.0, 1.5];
        let brute = (0..=10_000)
            .map(|s| {
                let p = arc.point(arc.span * s as f64 / 10_000.0);
                ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2)).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        assert!((arc.distance(q) - brute).abs() < 1e-6);
    }

    #[test]
    fn oversized_ribbon_is_rejected() {
        let mut spec = PhantomSpec::default();
        spec.ribbon_length.large = [13.0, 60.0];
        assert!(matches!(spec.validate(), Err(Error::Parameter(_))));
        let spec = PhantomSpec {
            ribbon_radius: [1.0, 4.0],
            ..PhantomSpec::default()
        };
        assert!(generate_phantom(&spec, &mut rng::seeded(0)).is_err());
        let spec = PhantomSpec {
            cavity_separation: 10.0,
            ..PhantomSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = PhantomSpec {
            stratum: Some(Stratum::Large),
            ..PhantomSpec::default()
        };
        let s = serde_json::to_string(&spec).unwrap();
        assert!(s.contains("\"large\""));
        assert_eq!(serde_json::from_str::<PhantomSpec>(&s).unwrap(), spec);
        let partial: PhantomSpec = serde_json::from_str(r#"{"noise_sd": 0.0}"#).unwrap();
        assert_eq!(partial.shape, [48, 48, 40]);
    }
}
