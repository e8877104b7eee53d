//! Electrode assemblies for the chip detector and the calibration chamber.
//!
//! Coordinates: `z` is the detection axis (normal to the chip, along the
//! ionization laser), the chip or electron barrier surface is the plane
//! `z = 0`, and the deflected ions leave the optics towards `+x`. All lengths
//! are metres, all potentials volts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{MM, UM};
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn unit(self) -> Vec3 {
        let mut v = Vec3::zeros();
        v[self.index()] = 1.0;
        v
    }

    /// The two remaining axes, in ascending order.
    pub fn transverse(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

/// Which supply an electrode hangs on. Electrodes sharing a role share a
/// voltage, which is what lets the field be built from one unit solve per role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Ground,
    Extraction,
    Tube,
    Deflection,
    Cem,
    Patch,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Ground => "ground",
            Role::Extraction => "extraction",
            Role::Tube => "tube",
            Role::Deflection => "deflection",
            Role::Cem => "cem",
            Role::Patch => "patch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Flat disc with a concentric circular hole.
    DiscWithAperture {
        center: Vec3,
        normal: Axis,
        outer_radius: f64,
        aperture_radius: f64,
        thickness: f64,
    },
    /// Axis-aligned slab, optionally pierced by a circular hole around the
    /// `z` axis (`x = y = 0`).
    Plate {
        center: Vec3,
        half_extent: Vec3,
        hole_radius: Option<f64>,
    },
    Tube {
        center: Vec3,
        axis: Axis,
        inner_radius: f64,
        wall: f64,
        length: f64,
    },
    /// Rectangular grid window in a plane normal to `normal`. `half_extent`
    /// is along the two transverse axes in ascending axis order.
    Mesh {
        center: Vec3,
        normal: Axis,
        half_extent: [f64; 2],
        thickness: f64,
        transmission: f64,
    },
    /// Solid disc. Used as the CEM horn entrance proxy and for chip patches.
    Disc {
        center: Vec3,
        normal: Axis,
        radius: f64,
        thickness: f64,
    },
}

/// Boundary slack for containment tests, so grid nodes that land on a
/// surface up to rounding are classified consistently.
pub const GEOMETRY_EPS: f64 = 1e-12;

fn transverse_radius(p: &Vec3, c: &Vec3, axis: Axis) -> f64 {
    let (a, b) = axis.transverse();
    let da = p[a] - c[a];
    let db = p[b] - c[b];
    (da * da + db * db).sqrt()
}

impl Shape {
    /// Point containment with every thin dimension widened to at least
    /// `min_thickness`, so that sheets thinner than a grid cell still
    /// capture a node layer.
    pub fn contains_padded(&self, p: &Vec3, min_thickness: f64) -> bool {
        const EPS: f64 = GEOMETRY_EPS;
        match self {
            Shape::DiscWithAperture {
                center,
                normal,
                outer_radius,
                aperture_radius,
                thickness,
            } => {
                let half = 0.5 * thickness.max(min_thickness);
                if (p[normal.index()] - center[normal.index()]).abs() > half + EPS {
                    return false;
                }
                let r = transverse_radius(p, center, *normal);
                r >= aperture_radius - EPS && r <= outer_radius + EPS
            }
            Shape::Plate {
                center,
                half_extent,
                hole_radius,
            } => {
                for d in 0..3 {
                    let half = half_extent[d].max(0.5 * min_thickness);
                    if (p[d] - center[d]).abs() > half + EPS {
                        return false;
                    }
                }
                match hole_radius {
                    Some(a) => transverse_radius(p, &Vec3::zeros(), Axis::Z) >= a - EPS,
                    None => true,
                }
            }
            Shape::Tube {
                center,
                axis,
                inner_radius,
                wall,
                length,
            } => {
                if (p[axis.index()] - center[axis.index()]).abs() > 0.5 * length + EPS {
                    return false;
                }
                let r = transverse_radius(p, center, *axis);
                r >= inner_radius - EPS && r <= inner_radius + wall.max(min_thickness) + EPS
            }
            Shape::Mesh {
                center,
                normal,
                half_extent,
                thickness,
                ..
            } => {
                let half = 0.5 * thickness.max(min_thickness);
                if (p[normal.index()] - center[normal.index()]).abs() > half + EPS {
                    return false;
                }
                let (a, b) = normal.transverse();
                (p[a] - center[a]).abs() <= half_extent[0] + EPS && (p[b] - center[b]).abs() <= half_extent[1] + EPS
            }
            Shape::Disc {
                center,
                normal,
                radius,
                thickness,
            } => {
                let half = 0.5 * thickness.max(min_thickness);
                (p[normal.index()] - center[normal.index()]).abs() <= half + EPS
                    && transverse_radius(p, center, *normal) <= radius + EPS
            }
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.contains_padded(p, 0.0)
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let slab = |center: &Vec3, normal: Axis, radius: f64, thickness: f64| {
            let mut half = Vec3::repeat(radius);
            half[normal.index()] = 0.5 * thickness;
            (center - half, center + half)
        };
        match self {
            Shape::DiscWithAperture {
                center,
                normal,
                outer_radius,
                thickness,
                ..
            } => slab(center, *normal, *outer_radius, *thickness),
            Shape::Plate {
                center, half_extent, ..
            } => (center - half_extent, center + half_extent),
            Shape::Tube {
                center,
                axis,
                inner_radius,
                wall,
                length,
            } => slab(center, *axis, inner_radius + wall, *length),
            Shape::Mesh {
                center,
                normal,
                half_extent,
                thickness,
                ..
            } => {
                let (a, b) = normal.transverse();
                let mut half = Vec3::zeros();
                half[a] = half_extent[0];
                half[b] = half_extent[1];
                half[normal.index()] = 0.5 * thickness;
                (center - half, center + half)
            }
            Shape::Disc {
                center,
                normal,
                radius,
                thickness,
            } => slab(center, *normal, *radius, *thickness),
        }
    }

    fn validate(&self, id: &str) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Geometry(format!("{id}: {name} must be positive, got {v}")))
            }
        };
        match self {
            Shape::DiscWithAperture {
                outer_radius,
                aperture_radius,
                thickness,
                ..
            } => {
                positive("outer radius", *outer_radius)?;
                positive("aperture radius", *aperture_radius)?;
                positive("thickness", *thickness)?;
                if aperture_radius >= outer_radius {
                    return Err(Error::Geometry(format!(
                        "{id}: aperture radius {aperture_radius} must be smaller than outer radius {outer_radius}"
                    )));
                }
            }
            Shape::Plate {
                half_extent,
                hole_radius,
                ..
            } => {
                for d in 0..3 {
                    positive("half extent", half_extent[d])?;
                }
                if let Some(a) = hole_radius {
                    positive("hole radius", *a)?;
                }
            }
            Shape::Tube {
                inner_radius,
                wall,
                length,
                ..
            } => {
                positive("inner radius", *inner_radius)?;
                positive("wall", *wall)?;
                positive("length", *length)?;
            }
            Shape::Mesh {
                half_extent,
                transmission,
                ..
            } => {
                positive("mesh half width", half_extent[0])?;
                positive("mesh half height", half_extent[1])?;
                if !(0.0..=1.0).contains(transmission) {
                    return Err(Error::Geometry(format!(
                        "{id}: mesh transmission {transmission} outside [0, 1]"
                    )));
                }
            }
            Shape::Disc { radius, thickness, .. } => {
                positive("radius", *radius)?;
                positive("thickness", *thickness)?;
            }
        }
        Ok(())
    }

    /// Whether the shape is a surface of revolution about the `z` axis
    /// through the origin, or a plate wide enough to act as an infinite plane
    /// out to `r_max`.
    pub fn is_axisymmetric(&self, r_max: f64) -> bool {
        let on_axis = |c: &Vec3| c[0].abs() < 1e-12 && c[1].abs() < 1e-12;
        match self {
            Shape::DiscWithAperture { center, normal, .. } | Shape::Disc { center, normal, .. } => {
                *normal == Axis::Z && on_axis(center)
            }
            Shape::Tube { center, axis, .. } => *axis == Axis::Z && on_axis(center),
            Shape::Plate {
                center, half_extent, ..
            } => {
                center[0] - half_extent[0] <= -r_max
                    && center[0] + half_extent[0] >= r_max
                    && center[1] - half_extent[1] <= -r_max
                    && center[1] + half_extent[1] >= r_max
            }
            Shape::Mesh { .. } => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Electrode {
    pub id: String,
    pub role: Role,
    pub shape: Shape,
    pub voltage: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|d| p[d] >= self.min[d] && p[d] <= self.max[d])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyKind {
    Detector,
    Calibration,
    Custom,
}

/// Non-electrode facts about an assembly that downstream modules need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    /// Gap between the grounded plane and the extraction electrode face.
    pub gap: f64,
    pub extraction_aperture_radius: f64,
    /// Laser access hole in the chip. Marker only, not part of the field solve.
    pub laser_hole_diameter: f64,
    /// Electron barrier aperture (calibration assembly only).
    pub electron_aperture_radius: Option<f64>,
    /// Distance behind the barrier of the electron collection plate. The
    /// region in between is a grounded, field-free enclosure.
    pub electron_collector_distance: Option<f64>,
    /// Center of the ionization region.
    pub source_center: Vec3,
    /// Apertures that ions never traverse and that are exempt from the solver
    /// resolution check.
    pub electron_only_apertures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assembly {
    pub kind: AssemblyKind,
    pub electrodes: Vec<Electrode>,
    pub domain: Aabb,
    /// Uniform residual field added on top of the solved potential (V/m).
    pub stray_field: Vec3,
    pub landmarks: Landmarks,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Medium {
    Vacuum,
    /// Electrode index and its potential.
    Conductor(usize, f64),
    Mesh(usize),
}

/// Electrode potentials. The chip and the electron barrier are always at 0 V.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoltageConfig {
    #[serde(rename = "u_e_v")]
    pub u_e: f64,
    #[serde(rename = "u_t_v")]
    pub u_t: f64,
    #[serde(rename = "u_d_v")]
    pub u_d: f64,
    #[serde(rename = "u_c_v")]
    pub u_c: f64,
}

impl Default for VoltageConfig {
    fn default() -> Self {
        // Tube ratio 3.2 and deflection ratio -4 at u_e = -40 V: ions born
        // at rest at the beam height inside the aperture projection reach
        // the CEM, apart from the outermost ring.
        Self {
            u_e: -40.0,
            u_t: -128.0,
            u_d: 160.0,
            u_c: -2900.0,
        }
    }
}

impl VoltageConfig {
    pub fn voltage_of(&self, role: Role) -> f64 {
        match role {
            Role::Ground => 0.0,
            Role::Extraction => self.u_e,
            Role::Tube => self.u_t,
            Role::Deflection => self.u_d,
            Role::Cem => self.u_c,
            Role::Patch => 0.0,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            u_e: self.u_e * k,
            u_t: self.u_t * k,
            u_d: self.u_d * k,
            u_c: self.u_c * k,
        }
    }

    /// Voltages from the two ratios that set the ion-optical behaviour.
    pub fn from_ratios(u_e: f64, tube_ratio: f64, deflection_ratio: f64, u_c: f64) -> Self {
        Self {
            u_e,
            u_t: tube_ratio * u_e,
            u_d: deflection_ratio * u_e,
            u_c,
        }
    }

    pub fn tube_ratio(&self) -> f64 {
        self.u_t / self.u_e
    }

    pub fn deflection_ratio(&self) -> f64 {
        self.u_d / self.u_e
    }
}

/// Constant potential offset on a disc of the chip surface, one of the two
/// stray-field knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPotential {
    pub center_x_mm: f64,
    pub center_y_mm: f64,
    pub radius_mm: f64,
    pub potential_v: f64,
}

/// Geometry parameters. Gap, apertures and tube dimensions follow the built
/// detector; thicknesses, the deflection box and the CEM placement are
/// assumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryParams {
    pub gap_mm: f64,
    pub extraction_diameter_mm: f64,
    pub aperture_diameter_mm: f64,
    pub extraction_thickness_mm: f64,
    pub insulation_gap_mm: f64,
    pub tube_length_mm: f64,
    pub tube_inner_diameter_mm: f64,
    pub tube_wall_mm: f64,
    /// Distance from the extraction electrode to the centre of the
    /// deflection electrode.
    pub deflection_distance_mm: f64,
    pub deflection_height_mm: f64,
    pub deflection_half_width_mm: f64,
    pub plate_thickness_mm: f64,
    pub mesh_transmission: f64,
    pub mesh_thickness_um: f64,
    /// Distance from the mesh plane to the CEM horn entrance.
    pub cem_distance_mm: f64,
    pub cem_diameter_mm: f64,
    pub cem_thickness_mm: f64,
    pub chip_thickness_mm: f64,
    pub laser_hole_diameter_um: f64,
    pub domain_half_width_mm: f64,
    pub domain_margin_mm: f64,
    pub barrier_aperture_diameter_mm: f64,
    pub electron_collector_distance_mm: f64,
    /// Height of the ionization region above the chip (detector) or the
    /// electron barrier (calibration).
    pub source_height_mm: f64,
    pub patch: Option<PatchPotential>,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            gap_mm: 1.6,
            extraction_diameter_mm: 8.0,
            aperture_diameter_mm: 1.0,
            extraction_thickness_mm: 0.25,
            insulation_gap_mm: 0.5,
            tube_length_mm: 36.0,
            tube_inner_diameter_mm: 4.0,
            tube_wall_mm: 0.25,
            deflection_distance_mm: 40.0,
            deflection_height_mm: 6.0,
            deflection_half_width_mm: 2.5,
            plate_thickness_mm: 0.25,
            mesh_transmission: 0.87,
            mesh_thickness_um: 50.0,
            cem_distance_mm: 2.5,
            cem_diameter_mm: 6.0,
            cem_thickness_mm: 0.5,
            chip_thickness_mm: 0.25,
            laser_hole_diameter_um: 150.0,
            domain_half_width_mm: 4.5,
            domain_margin_mm: 0.5,
            barrier_aperture_diameter_mm: 0.5,
            electron_collector_distance_mm: 25.0,
            source_height_mm: 0.7,
            patch: None,
        }
    }
}

impl GeometryParams {
    pub fn check(&self) -> Result<()> {
        let fields = [
            ("gap_mm", self.gap_mm),
            ("extraction_diameter_mm", self.extraction_diameter_mm),
            ("aperture_diameter_mm", self.aperture_diameter_mm),
            ("extraction_thickness_mm", self.extraction_thickness_mm),
            ("insulation_gap_mm", self.insulation_gap_mm),
            ("tube_length_mm", self.tube_length_mm),
            ("tube_inner_diameter_mm", self.tube_inner_diameter_mm),
            ("tube_wall_mm", self.tube_wall_mm),
            ("deflection_distance_mm", self.deflection_distance_mm),
            ("deflection_height_mm", self.deflection_height_mm),
            ("deflection_half_width_mm", self.deflection_half_width_mm),
            ("plate_thickness_mm", self.plate_thickness_mm),
            ("cem_distance_mm", self.cem_distance_mm),
            ("cem_diameter_mm", self.cem_diameter_mm),
            ("cem_thickness_mm", self.cem_thickness_mm),
            ("chip_thickness_mm", self.chip_thickness_mm),
            ("laser_hole_diameter_um", self.laser_hole_diameter_um),
            ("domain_half_width_mm", self.domain_half_width_mm),
            ("domain_margin_mm", self.domain_margin_mm),
            ("barrier_aperture_diameter_mm", self.barrier_aperture_diameter_mm),
            ("electron_collector_distance_mm", self.electron_collector_distance_mm),
            ("source_height_mm", self.source_height_mm),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Geometry(format!("{name} must be positive, got {v}")));
            }
        }
        if self.aperture_diameter_mm >= self.extraction_diameter_mm {
            return Err(Error::Geometry(format!(
                "aperture diameter {} mm must be smaller than the extraction disc diameter {} mm",
                self.aperture_diameter_mm, self.extraction_diameter_mm
            )));
        }
        if !(0.0..=1.0).contains(&self.mesh_transmission) {
            return Err(Error::Geometry(format!(
                "mesh transmission {} outside [0, 1]",
                self.mesh_transmission
            )));
        }
        if self.source_height_mm >= self.gap_mm {
            return Err(Error::Geometry(format!(
                "source height {} mm must lie inside the {} mm extraction gap",
                self.source_height_mm, self.gap_mm
            )));
        }
        let tube_outer = 0.5 * self.tube_inner_diameter_mm + self.tube_wall_mm;
        if tube_outer >= self.domain_half_width_mm || 0.5 * self.extraction_diameter_mm >= self.domain_half_width_mm {
            return Err(Error::Geometry(
                "domain half width must enclose the tube and the extraction disc".into(),
            ));
        }
        let tube_end = self.gap_mm + self.extraction_thickness_mm + self.insulation_gap_mm + self.tube_length_mm;
        let deflect_bottom = self.gap_mm + self.deflection_distance_mm - 0.5 * self.deflection_height_mm;
        if deflect_bottom - self.plate_thickness_mm < tube_end - 1e-9 {
            return Err(Error::Geometry(format!(
                "deflection region starts at {deflect_bottom} mm, too close to the tube end at {tube_end} mm"
            )));
        }
        Ok(())
    }
}

fn build(params: &GeometryParams, kind: AssemblyKind) -> Result<Assembly> {
    params.check()?;
    let p = params;
    let gap = p.gap_mm * MM;
    let t_e = p.extraction_thickness_mm * MM;
    let ins = p.insulation_gap_mm * MM;
    let t_w = p.plate_thickness_mm * MM;
    let half_w = p.domain_half_width_mm * MM;
    let margin = p.domain_margin_mm * MM;
    let w = p.deflection_half_width_mm * MM;

    let tube_start = gap + t_e + ins;
    let tube_len = p.tube_length_mm * MM;
    let defl_center = gap + p.deflection_distance_mm * MM;
    let defl_lo = defl_center - 0.5 * p.deflection_height_mm * MM;
    let defl_hi = defl_center + 0.5 * p.deflection_height_mm * MM;
    let cem_face = w + p.cem_distance_mm * MM;
    let cem_t = p.cem_thickness_mm * MM;

    let domain = Aabb {
        min: Vec3::new(-half_w, -half_w, -p.chip_thickness_mm * MM),
        max: Vec3::new((cem_face + cem_t + margin).max(half_w), half_w, defl_hi + t_w + margin),
    };
    let dom_c = 0.5 * (domain.min + domain.max);
    let dom_h = 0.5 * domain.extent();

    let mut electrodes = Vec::new();
    if let Some(patch) = &p.patch {
        electrodes.push(Electrode {
            id: "patch".into(),
            role: Role::Patch,
            shape: Shape::Disc {
                center: Vec3::new(patch.center_x_mm * MM, patch.center_y_mm * MM, 0.0),
                normal: Axis::Z,
                radius: patch.radius_mm * MM,
                thickness: 1.0 * UM,
            },
            voltage: patch.potential_v,
        });
    }
    let t_chip = p.chip_thickness_mm * MM;
    let ground_plate = |hole: Option<f64>| Shape::Plate {
        center: Vec3::new(dom_c[0], dom_c[1], -0.5 * t_chip),
        half_extent: Vec3::new(dom_h[0], dom_h[1], 0.5 * t_chip),
        hole_radius: hole,
    };
    let mut electron_only = Vec::new();
    match kind {
        AssemblyKind::Calibration => {
            electrodes.push(Electrode {
                id: "barrier".into(),
                role: Role::Ground,
                shape: ground_plate(Some(0.5 * p.barrier_aperture_diameter_mm * MM)),
                voltage: 0.0,
            });
            electron_only.push("barrier".to_string());
        }
        _ => electrodes.push(Electrode {
            id: "chip".into(),
            role: Role::Ground,
            shape: ground_plate(None),
            voltage: 0.0,
        }),
    }
    electrodes.push(Electrode {
        id: "extraction".into(),
        role: Role::Extraction,
        shape: Shape::DiscWithAperture {
            center: Vec3::new(0.0, 0.0, gap + 0.5 * t_e),
            normal: Axis::Z,
            outer_radius: 0.5 * p.extraction_diameter_mm * MM,
            aperture_radius: 0.5 * p.aperture_diameter_mm * MM,
            thickness: t_e,
        },
        voltage: 0.0,
    });
    electrodes.push(Electrode {
        id: "tube".into(),
        role: Role::Tube,
        shape: Shape::Tube {
            center: Vec3::new(0.0, 0.0, tube_start + 0.5 * tube_len),
            axis: Axis::Z,
            inner_radius: 0.5 * p.tube_inner_diameter_mm * MM,
            wall: p.tube_wall_mm * MM,
            length: tube_len,
        },
        voltage: 0.0,
    });
    // Deflection box above the tube exit. The deflector is an L-shaped
    // electrode (the -x side and the lid); the +x side is the exit mesh, and
    // the two y walls and the flange closing the tube end sit at tube
    // potential, insulated from the deflector by `ins`.
    let box_h = 0.5 * (defl_hi - defl_lo);
    let box_c = 0.5 * (defl_hi + defl_lo);
    electrodes.push(Electrode {
        id: "deflector".into(),
        role: Role::Deflection,
        shape: Shape::Plate {
            center: Vec3::new(-w - 0.5 * t_w, 0.0, box_c),
            half_extent: Vec3::new(0.5 * t_w, w + t_w, box_h),
            hole_radius: None,
        },
        voltage: 0.0,
    });
    electrodes.push(Electrode {
        id: "lid".into(),
        role: Role::Deflection,
        shape: Shape::Plate {
            center: Vec3::new(-0.5 * (t_w + ins), 0.0, defl_hi + 0.5 * t_w),
            half_extent: Vec3::new(w + 0.5 * (t_w - ins), w + t_w, 0.5 * t_w),
            hole_radius: None,
        },
        voltage: 0.0,
    });
    for (id, sign) in [("wall_low_y", -1.0), ("wall_high_y", 1.0)] {
        electrodes.push(Electrode {
            id: id.into(),
            role: Role::Tube,
            shape: Shape::Plate {
                center: Vec3::new(0.5 * ins, sign * (w + 0.5 * t_w), box_c - 0.5 * ins),
                half_extent: Vec3::new(w - 0.5 * ins, 0.5 * t_w, box_h - 0.5 * ins),
                hole_radius: None,
            },
            voltage: 0.0,
        });
    }
    electrodes.push(Electrode {
        id: "flange".into(),
        role: Role::Tube,
        shape: Shape::Plate {
            center: Vec3::new(0.5 * ins, 0.0, defl_lo - 0.5 * t_w),
            half_extent: Vec3::new(w - 0.5 * ins, w + t_w, 0.5 * t_w),
            hole_radius: Some(0.5 * p.tube_inner_diameter_mm * MM),
        },
        voltage: 0.0,
    });
    electrodes.push(Electrode {
        id: "mesh".into(),
        role: Role::Tube,
        shape: Shape::Mesh {
            center: Vec3::new(w, 0.0, box_c),
            normal: Axis::X,
            half_extent: [w, box_h],
            thickness: p.mesh_thickness_um * UM,
            transmission: p.mesh_transmission,
        },
        voltage: 0.0,
    });
    electrodes.push(Electrode {
        id: "cem".into(),
        role: Role::Cem,
        shape: Shape::Disc {
            center: Vec3::new(cem_face + 0.5 * cem_t, 0.0, box_c),
            normal: Axis::X,
            radius: 0.5 * p.cem_diameter_mm * MM,
            thickness: cem_t,
        },
        voltage: 0.0,
    });

    let (source_center, e_ap, e_coll) = match kind {
        AssemblyKind::Calibration => (
            Vec3::new(0.0, 0.0, p.source_height_mm * MM),
            Some(0.5 * p.barrier_aperture_diameter_mm * MM),
            Some(p.electron_collector_distance_mm * MM),
        ),
        _ => (Vec3::new(0.0, 0.0, p.source_height_mm * MM), None, None),
    };
    if let Some(e) = e_ap {
        if e >= 0.5 * p.aperture_diameter_mm * MM {
            return Err(Error::Geometry(format!(
                "electron aperture diameter {} mm must be smaller than the ion aperture diameter {} mm",
                p.barrier_aperture_diameter_mm, p.aperture_diameter_mm
            )));
        }
    }

    let assembly = Assembly {
        kind,
        electrodes,
        domain,
        stray_field: Vec3::zeros(),
        landmarks: Landmarks {
            gap,
            extraction_aperture_radius: 0.5 * p.aperture_diameter_mm * MM,
            laser_hole_diameter: p.laser_hole_diameter_um * UM,
            electron_aperture_radius: e_ap,
            electron_collector_distance: e_coll,
            source_center,
            electron_only_apertures: electron_only,
        },
    };
    assembly.validate()?;
    Ok(assembly)
}

/// Chip-side detector: grounded chip, extraction disc, tube lens, deflection
/// box with the exit mesh, and the CEM horn beyond it.
pub fn build_detector_assembly(params: &GeometryParams) -> Result<Assembly> {
    build(params, AssemblyKind::Detector)
}

/// Calibration chamber: the chip is replaced by a grounded electron barrier
/// whose aperture is smaller than the ion extraction aperture.
pub fn build_calibration_assembly(params: &GeometryParams) -> Result<Assembly> {
    build(params, AssemblyKind::Calibration)
}

/// Two plates spanning a square box of half width `half_width`: grounded
/// below `z = 0` and at `voltage` above `z = gap`. The reference problem
/// with a uniform field `voltage / gap` between the plates.
pub fn parallel_plate_assembly(gap: f64, voltage: f64, half_width: f64, thickness: f64) -> Assembly {
    let half = half_width;
    let t = thickness;
    Assembly {
        kind: AssemblyKind::Custom,
        electrodes: vec![
            Electrode {
                id: "low".into(),
                role: Role::Ground,
                shape: Shape::Plate {
                    center: Vec3::new(0.0, 0.0, -0.5 * t),
                    half_extent: Vec3::new(half, half, 0.5 * t),
                    hole_radius: None,
                },
                voltage: 0.0,
            },
            Electrode {
                id: "high".into(),
                role: Role::Extraction,
                shape: Shape::Plate {
                    center: Vec3::new(0.0, 0.0, gap + 0.5 * t),
                    half_extent: Vec3::new(half, half, 0.5 * t),
                    hole_radius: None,
                },
                voltage,
            },
        ],
        domain: Aabb {
            min: Vec3::new(-half, -half, -t),
            max: Vec3::new(half, half, gap + t),
        },
        stray_field: Vec3::zeros(),
        landmarks: Landmarks {
            gap,
            extraction_aperture_radius: 0.0,
            laser_hole_diameter: 0.0,
            electron_aperture_radius: None,
            electron_collector_distance: None,
            source_center: Vec3::zeros(),
            electron_only_apertures: vec![],
        },
    }
}

impl Assembly {
    /// Checks the structural invariants: valid shapes, everything inside the
    /// domain, and no solid overlap between electrodes on different supplies.
    pub fn validate(&self) -> Result<()> {
        let eps = 1e-12;
        for e in &self.electrodes {
            e.shape.validate(&e.id)?;
            let (lo, hi) = e.shape.bounds();
            for d in 0..3 {
                if lo[d] < self.domain.min[d] - eps || hi[d] > self.domain.max[d] + eps {
                    return Err(Error::Geometry(format!(
                        "electrode `{}` extends outside the domain",
                        e.id
                    )));
                }
            }
        }
        for (i, a) in self.electrodes.iter().enumerate() {
            for b in &self.electrodes[i + 1..] {
                if a.role == b.role || a.role == Role::Patch || b.role == Role::Patch {
                    continue;
                }
                if let Some(p) = overlap_witness(&a.shape, &b.shape) {
                    return Err(Error::Geometry(format!(
                        "electrodes `{}` and `{}` overlap near {:?}",
                        a.id,
                        b.id,
                        [p[0], p[1], p[2]]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn classify_point(&self, p: &Vec3) -> Result<Medium> {
        if !self.domain.contains(p) {
            return Err(Error::OutOfDomain([p[0], p[1], p[2]]));
        }
        Ok(self.classify_padded(p, 0.0))
    }

    /// Classification used for grid nodes: thin sheets are widened to
    /// `min_thickness`. Earlier electrodes take precedence, so a chip patch
    /// listed first overrides the chip below it.
    pub fn classify_padded(&self, p: &Vec3, min_thickness: f64) -> Medium {
        for (i, e) in self.electrodes.iter().enumerate() {
            if e.shape.contains_padded(p, min_thickness) {
                return match e.shape {
                    Shape::Mesh { .. } => Medium::Mesh(i),
                    _ => Medium::Conductor(i, e.voltage),
                };
            }
        }
        Medium::Vacuum
    }

    pub fn with_voltages(&self, v: &VoltageConfig) -> Assembly {
        let mut out = self.clone();
        for e in &mut out.electrodes {
            if e.role != Role::Patch {
                e.voltage = v.voltage_of(e.role);
            }
        }
        out
    }

    pub fn with_stray_field(mut self, stray: Vec3) -> Assembly {
        self.stray_field = stray;
        self
    }

    /// Copy with one supply at 1 V and every other electrode at 0 V.
    pub fn unit_basis(&self, role: Role) -> Assembly {
        let mut out = self.clone();
        for e in &mut out.electrodes {
            e.voltage = if e.role == role { 1.0 } else { 0.0 };
        }
        out.stray_field = Vec3::zeros();
        out
    }

    /// Copy with every electrode at 0 V and no stray field: the geometry alone.
    pub fn zeroed(&self) -> Assembly {
        let mut out = self.clone();
        for e in &mut out.electrodes {
            e.voltage = 0.0;
        }
        out.stray_field = Vec3::zeros();
        out
    }

    /// Supplies present in this assembly other than ground.
    pub fn roles(&self) -> Vec<Role> {
        let mut roles: Vec<Role> = self
            .electrodes
            .iter()
            .map(|e| e.role)
            .filter(|r| *r != Role::Ground)
            .collect();
        roles.sort();
        roles.dedup();
        roles
    }

    pub fn electrode(&self, id: &str) -> Option<&Electrode> {
        self.electrodes.iter().find(|e| e.id == id)
    }

    pub fn voltage_of(&self, role: Role) -> Option<f64> {
        self.electrodes.iter().find(|e| e.role == role).map(|e| e.voltage)
    }

    pub fn extraction_voltage(&self) -> f64 {
        self.voltage_of(Role::Extraction).unwrap_or(0.0)
    }

    /// The exit mesh: electrode index, plane axis, plane coordinate,
    /// transverse window centre and half extents, transmission.
    pub fn mesh(&self) -> Option<MeshPlane> {
        self.electrodes.iter().enumerate().find_map(|(i, e)| match e.shape {
            Shape::Mesh {
                center,
                normal,
                half_extent,
                transmission,
                ..
            } => Some(MeshPlane {
                index: i,
                normal,
                center,
                half_extent,
                transmission,
            }),
            _ => None,
        })
    }

    /// The smallest aperture an ion has to pass through, as a diameter.
    pub fn smallest_ion_aperture(&self) -> Option<f64> {
        self.electrodes
            .iter()
            .filter(|e| !self.landmarks.electron_only_apertures.contains(&e.id))
            .filter_map(|e| match e.shape {
                Shape::DiscWithAperture { aperture_radius, .. } => Some(2.0 * aperture_radius),
                Shape::Plate {
                    hole_radius: Some(a), ..
                } => Some(2.0 * a),
                _ => None,
            })
            .min_by(|a, b| a.total_cmp(b))
    }

    /// Restriction to the rotationally symmetric lens (ground plane,
    /// extraction disc, tube) in a domain symmetric about the axis that ends
    /// at the tube exit.
    pub fn lens_subassembly(&self) -> Assembly {
        let half = self.domain.max[1].min(-self.domain.min[1]);
        let tube_end = self
            .electrodes
            .iter()
            .find_map(|e| match (&e.role, &e.shape) {
                (Role::Tube, Shape::Tube { center, length, .. }) => Some(center[2] + 0.5 * length),
                _ => None,
            })
            .unwrap_or(self.domain.max[2]);
        let domain = Aabb {
            min: Vec3::new(-half, -half, self.domain.min[2]),
            max: Vec3::new(half, half, tube_end),
        };
        let electrodes = self
            .electrodes
            .iter()
            .filter(|e| matches!(e.role, Role::Ground | Role::Extraction | Role::Tube))
            .filter(|e| !matches!(e.shape, Shape::Mesh { .. }))
            .filter(|e| {
                let (lo, _) = e.shape.bounds();
                lo[2] < tube_end - 1e-9
            })
            .map(|e| {
                let mut e = e.clone();
                if let Shape::Plate {
                    center,
                    half_extent,
                    hole_radius,
                } = &e.shape
                {
                    if e.role == Role::Ground {
                        e.shape = Shape::Plate {
                            center: Vec3::new(0.0, 0.0, center[2]),
                            half_extent: Vec3::new(half, half, half_extent[2]),
                            hole_radius: *hole_radius,
                        };
                    }
                }
                e
            })
            .collect();
        Assembly {
            kind: AssemblyKind::Custom,
            electrodes,
            domain,
            stray_field: self.stray_field,
            landmarks: self.landmarks.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshPlane {
    pub index: usize,
    pub normal: Axis,
    pub center: Vec3,
    pub half_extent: [f64; 2],
    pub transmission: f64,
}

impl MeshPlane {
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        p[self.normal.index()] - self.center[self.normal.index()]
    }

    pub fn window_contains(&self, p: &Vec3) -> bool {
        let (a, b) = self.normal.transverse();
        (p[a] - self.center[a]).abs() <= self.half_extent[0] && (p[b] - self.center[b]).abs() <= self.half_extent[1]
    }
}

fn overlap_witness(a: &Shape, b: &Shape) -> Option<Vec3> {
    let (alo, ahi) = a.bounds();
    let (blo, bhi) = b.bounds();
    let lo = alo.sup(&blo);
    let hi = ahi.inf(&bhi);
    if (0..3).any(|d| lo[d] >= hi[d]) {
        return None;
    }
    const N: usize = 7;
    for i in 0..N {
        for j in 0..N {
            for k in 0..N {
                let f = |n: usize| (n as f64 + 0.5) / N as f64;
                let p = Vec3::new(
                    lo[0] + f(i) * (hi[0] - lo[0]),
                    lo[1] + f(j) * (hi[1] - lo[1]),
                    lo[2] + f(k) * (hi[2] - lo[2]),
                );
                if a.contains(&p) && b.contains(&p) {
                    return Some(p);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn detector() -> Assembly {
        build_detector_assembly(&GeometryParams::default()).unwrap()
    }

    #[test]
    fn default_detector_dimensions() {
        let a = detector();
        assert!((a.landmarks.extraction_aperture_radius * 2.0 - 1.0e-3).abs() < 1e-12);
        assert!((a.landmarks.gap - 1.6e-3).abs() < 1e-12);
        match a.electrode("tube").unwrap().shape {
            Shape::Tube { length, .. } => assert!((length - 36e-3).abs() < 1e-12),
            _ => panic!("tube has the wrong shape"),
        }
        match a.mesh() {
            Some(m) => assert_eq!(m.transmission, 0.87),
            None => panic!("no mesh"),
        }
    }

    #[test]
    fn full_transmission_mesh_is_accepted() {
        let params = GeometryParams {
            mesh_transmission: 1.0,
            ..Default::default()
        };
        let a = build_detector_assembly(&params).unwrap();
        assert_eq!(a.mesh().unwrap().transmission, 1.0);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let bad = GeometryParams {
            tube_length_mm: -1.0,
            ..Default::default()
        };
        assert!(build_detector_assembly(&bad).is_err());
        let bad = GeometryParams {
            aperture_diameter_mm: 8.0,
            ..Default::default()
        };
        assert!(build_detector_assembly(&bad).is_err());
        let bad = GeometryParams {
            mesh_transmission: 1.2,
            ..Default::default()
        };
        assert!(build_detector_assembly(&bad).is_err());
    }

    #[test]
    fn calibration_barrier_aperture_is_smaller_than_ion_aperture() {
        let a = build_calibration_assembly(&GeometryParams::default()).unwrap();
        let e = a.landmarks.electron_aperture_radius.unwrap();
        assert!((2.0 * e - 0.5e-3).abs() < 1e-12);
        assert!(e < a.landmarks.extraction_aperture_radius);

        let bad = GeometryParams {
            barrier_aperture_diameter_mm: 1.2,
            ..Default::default()
        };
        assert!(matches!(build_calibration_assembly(&bad), Err(Error::Geometry(_))));
    }

    #[test]
    fn ionization_region_sits_close_to_the_barrier() {
        let a = build_calibration_assembly(&GeometryParams::default()).unwrap();
        let z = a.landmarks.source_center[2];
        assert!(z > 0.0 && z < a.landmarks.gap);
        assert!(z < 1e-3);
    }

    #[test]
    fn classify_reference_points() {
        let a = detector().with_voltages(&VoltageConfig::default());
        match a.classify_point(&Vec3::new(0.0, 0.0, 0.0)).unwrap() {
            Medium::Conductor(i, v) => {
                assert_eq!(a.electrodes[i].id, "chip");
                assert_eq!(v, 0.0);
            }
            m => panic!("chip surface classified as {m:?}"),
        }
        let aperture_center = Vec3::new(0.0, 0.0, 1.6e-3 + 0.125e-3);
        assert_eq!(a.classify_point(&aperture_center).unwrap(), Medium::Vacuum);
        assert_eq!(a.classify_point(&Vec3::new(0.0, 0.0, 0.8e-3)).unwrap(), Medium::Vacuum);
        match a.classify_point(&Vec3::new(2e-3, 0.0, 1.7e-3)).unwrap() {
            Medium::Conductor(i, v) => {
                assert_eq!(a.electrodes[i].id, "extraction");
                assert_eq!(v, -40.0);
            }
            m => panic!("extraction disc classified as {m:?}"),
        }
        assert!(matches!(
            a.classify_point(&Vec3::new(0.0, 0.0, 1.0)),
            Err(Error::OutOfDomain(_))
        ));
    }

    #[test]
    fn axis_segment_to_aperture_is_clear() {
        let a = detector();
        for n in 0..=200 {
            let z = 1e-9 + (1.6e-3 + 0.25e-3) * n as f64 / 200.0;
            assert_eq!(
                a.classify_point(&Vec3::new(0.0, 0.0, z)).unwrap(),
                Medium::Vacuum,
                "z = {z}"
            );
        }
    }

    #[test]
    fn builds_are_pure() {
        assert_eq!(detector(), detector());
    }

    #[test]
    fn overlapping_electrodes_on_different_supplies_are_rejected() {
        let mut a = detector();
        let mut rogue = a.electrode("extraction").unwrap().clone();
        rogue.id = "rogue".into();
        rogue.role = Role::Deflection;
        a.electrodes.push(rogue);
        assert!(a.validate().is_err());
    }

    #[test]
    fn ratios_round_trip() {
        let v = VoltageConfig::from_ratios(-40.0, 2.0, -0.5, -2900.0);
        assert_eq!(v.u_t, -80.0);
        assert_eq!(v.u_d, 20.0);
        assert_eq!(v.tube_ratio(), 2.0);
        assert_eq!(v.deflection_ratio(), -0.5);
    }
}
