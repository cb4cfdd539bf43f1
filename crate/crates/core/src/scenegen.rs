//! Procedural scenes and posed-image datasets.
//!
//! Scenes are short lists of colored spheres and boxes inside the
//! `[-1,1]^3` cube. [`voxelize_scene`] turns a scene into a ground-truth
//! grid using the same raw parameterization as fitted fields, and
//! [`build_dataset`] renders every scene from random cameras on a sphere.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! scenes/scene_0000/gt.vxgr
//! scenes/scene_0000/view_000.ppm ...
//! scenes/scene_0000/fitted.vxgr      (after fitting)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{sample_spherical_poses, CameraPose, Intrinsics, Vec3};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::render::{render_image, QuadratureConfig, View};
use crate::rng::{self, Purpose};
use crate::voxgrid::{logit, ActivationParams, Bounds, VoxelGrid};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MAX_PRIMITIVES: usize = 16;

/// Raw color of empty space: `logit(0.99)`, i.e. near-white.
pub fn white_raw() -> f64 {
    logit(0.99)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: Vec3,
    pub albedo: [f64; 3],
    pub density: f64,
}

impl Primitive {
    pub fn contains(&self, p: Vec3) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match self.shape {
            Shape::Sphere { radius } => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= radius * radius,
            Shape::Box { half_extents } => (0..3).all(|a| d[a].abs() <= half_extents[a]),
        }
    }

    fn intersects_unit_cube(&self) -> bool {
        match self.shape {
            Shape::Sphere { radius } => {
                let d2: f64 = self
                    .center
                    .iter()
                    .map(|&c| {
                        let e = c.abs() - 1.0;
                        if e > 0.0 {
                            e * e
                        } else {
                            0.0
                        }
                    })
                    .sum();
                d2 < radius * radius
            }
            Shape::Box { half_extents } => (0..3).all(|a| self.center[a].abs() - half_extents[a] < 1.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let sizes_ok = match self.shape {
            Shape::Sphere { radius } => radius.is_finite() && radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|h| h.is_finite() && *h > 0.0),
        };
        if !sizes_ok {
            return Err(Error::invalid("primitive sizes must be positive"));
        }
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("primitive center must be finite"));
        }
        if !self.albedo.iter().all(|&a| a > 0.0 && a < 1.0) {
            return Err(Error::invalid("primitive albedo must lie in (0, 1)"));
        }
        if !(self.density.is_finite() && self.density > 0.0) {
            return Err(Error::invalid("primitive density must be positive"));
        }
        if !self.intersects_unit_cube() {
            return Err(Error::invalid(format!(
                "primitive at {:?} lies outside the [-1,1]^3 bounds",
                self.center
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(primitives: Vec<Primitive>, seed: u64) -> Result<Self> {
        let spec = Self { primitives, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() || self.primitives.len() > MAX_PRIMITIVES {
            return Err(Error::invalid(format!(
                "scene needs 1..={MAX_PRIMITIVES} primitives, got {}",
                self.primitives.len()
            )));
        }
        self.primitives.iter().try_for_each(Primitive::validate)
    }

    /// First primitive containing `p`; earlier primitives win overlaps.
    pub fn primitive_at(&self, p: Vec3) -> Option<&Primitive> {
        self.primitives.iter().find(|prim| prim.contains(p))
    }
}

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.10, 0.20, 0.85],
    [0.90, 0.80, 0.10],
    [0.85, 0.10, 0.75],
    [0.10, 0.80, 0.85],
    [0.95, 0.50, 0.05],
    [0.50, 0.10, 0.80],
];

/// Deterministic scene with 1 to 4 primitives.
pub fn random_scene(seed: u64) -> SceneSpec {
    let mut rng = rng::stream(seed, Purpose::Scene, 0);
    let count = rng.random_range(1..=4usize);
    let primitives = (0..count)
        .map(|_| {
            let center = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            let shape = if rng.random_bool(0.5) {
                Shape::Sphere {
                    radius: rng.random_range(0.2..0.5),
                }
            } else {
                Shape::Box {
                    half_extents: [
                        rng.random_range(0.15..0.45),
                        rng.random_range(0.15..0.45),
                        rng.random_range(0.15..0.45),
                    ],
                }
            };
            Primitive {
                shape,
                center,
                albedo: PALETTE[rng.random_range(0..PALETTE.len())],
                density: rng.random_range(20.0..=200.0),
            }
        })
        .collect();
    SceneSpec::new(primitives, seed).expect("generated scenes satisfy the scene invariants")
}

/// Ground-truth grid: voxel centers inside a primitive take its density
/// and albedo in raw space; everything else is `d_min` and raw white.
pub fn voxelize_scene(spec: &SceneSpec, resolution: usize, act: &ActivationParams) -> Result<VoxelGrid> {
    spec.validate()?;
    let white = white_raw();
    let mut grid = VoxelGrid::filled(resolution, Bounds::unit_cube(), [act.d_min, white, white, white])?;
    for x in 0..resolution {
        for y in 0..resolution {
            for z in 0..resolution {
                if let Some(p) = spec.primitive_at(grid.voxel_center(x, y, z)) {
                    let c = p.albedo.map(|a| logit(a.clamp(0.01, 0.99)));
                    grid.set_feature(x, y, z, [act.raw_for_density(p.density), c[0], c[1], c[2]]);
                }
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub n_views: usize,
    pub resolution: usize,
    pub image_size: usize,
    pub radius: f64,
    /// Samples per ray; `None` means twice the resolution.
    pub samples_per_ray: Option<usize>,
    pub activation: ActivationParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_scenes: 64,
            n_views: 64,
            resolution: 16,
            image_size: 64,
            radius: 4.0,
            samples_per_ray: None,
            activation: ActivationParams::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 || self.n_views == 0 {
            return Err(Error::invalid("dataset needs at least one scene and one view"));
        }
        if self.resolution < 2 || self.image_size == 0 {
            return Err(Error::invalid("dataset resolution must be >= 2 and image size >= 1"));
        }
        if !(self.radius > 1.0) {
            return Err(Error::invalid("camera radius must place cameras outside the grid"));
        }
        self.activation.validate()?;
        self.quadrature().validate()
    }

    pub fn quadrature(&self) -> QuadratureConfig {
        let mut q = QuadratureConfig::for_resolution(self.resolution);
        if let Some(n) = self.samples_per_ray {
            q.n_samples = n;
        }
        q
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::framing_unit_cube(self.image_size, self.image_size, self.radius)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRef {
    /// Relative to the dataset root.
    pub path: String,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub rotation: [f64; 9],
    pub position: [f64; 3],
    pub image: FileRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub spec: SceneSpec,
    pub grid: FileRef,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitted_grid: Option<FileRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
    pub intrinsics: Intrinsics,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

fn file_ref(root: &Path, rel: String, bytes: &[u8]) -> Result<FileRef> {
    let path = root.join(&rel);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(FileRef {
        path: rel,
        crc32: crc32fast::hash(bytes),
    })
}

fn build_scene(
    staging: &Path,
    index: usize,
    cfg: &DatasetConfig,
    intr: &Intrinsics,
    seed: u64,
) -> Result<SceneEntry> {
    let scene_seed: u64 = rng::stream(seed, Purpose::Scene, index as u64 + 1).random();
    let id = format!("scene_{index:04}");
    let rel_dir = format!("scenes/{id}");
    let dir = staging.join(&rel_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let spec = random_scene(scene_seed);
    // stored grids are f32; render from exactly what is stored
    let grid = voxelize_scene(&spec, cfg.resolution, &cfg.activation)?.quantized();
    let grid_ref = file_ref(staging, format!("{rel_dir}/gt.vxgr"), &grid.to_bytes())?;
    let poses = sample_spherical_poses(cfg.n_views, cfg.radius, scene_seed)?;
    let quad = cfg.quadrature();
    let views = poses
        .iter()
        .enumerate()
        .map(|(j, pose)| {
            let img = render_image(&grid, pose, intr, &quad, &cfg.activation)?;
            let image = file_ref(staging, format!("{rel_dir}/view_{j:03}.ppm"), &img.to_ppm())?;
            Ok(ViewEntry {
                rotation: pose.rotation_flat(),
                position: pose.position,
                image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneEntry {
        id,
        spec,
        grid: grid_ref,
        views,
        fitted_grid: None,
    })
}

/// Builds a dataset directory at `out_dir`, which must not exist or be
/// empty. Work happens in a sibling staging directory that is renamed into
/// place on success and removed on failure.
pub fn build_dataset(cfg: &DatasetConfig, seed: u64, out_dir: impl AsRef<Path>) -> Result<SceneDataset> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if non_empty {
            return Err(Error::invalid(format!(
                "dataset directory {} already exists and is not empty",
                out_dir.display()
            )));
        }
        fs::remove_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    let mut staging = out_dir.as_os_str().to_owned();
    staging.push(".partial");
    let staging = PathBuf::from(staging);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

    let result = (|| {
        let intr = cfg.intrinsics()?;
        let scenes = (0..cfg.n_scenes)
            .into_par_iter()
            .map(|i| build_scene(&staging, i, cfg, &intr, seed))
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            seed,
            config: *cfg,
            intrinsics: intr,
            scenes,
        };
        write_manifest(&staging, &manifest)?;
        Ok(manifest)
    })();
    match result {
        Ok(manifest) => {
            fs::rename(&staging, out_dir).map_err(|e| Error::io(out_dir, e))?;
            Ok(SceneDataset {
                root: out_dir.to_path_buf(),
                manifest,
            })
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

impl SceneDataset {
    /// Opens a dataset and verifies every referenced file against its
    /// checksum.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let ds = Self { root, manifest };
        ds.verify()?;
        Ok(ds)
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Dataset {
            path: self.root.clone(),
            reason: reason.into(),
        }
    }

    pub fn verify(&self) -> Result<()> {
        let m = &self.manifest;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(self.err(format!("unsupported schema version {}", m.schema_version)));
        }
        if m.scenes.len() != m.config.n_scenes {
            return Err(self.err(format!(
                "manifest lists {} scenes, config says {}",
                m.scenes.len(),
                m.config.n_scenes
            )));
        }
        for scene in &m.scenes {
            scene.spec.validate()?;
            if scene.views.len() != m.config.n_views {
                return Err(self.err(format!(
                    "{} has {} views, config says {}",
                    scene.id,
                    scene.views.len(),
                    m.config.n_views
                )));
            }
            let refs = std::iter::once(&scene.grid)
                .chain(scene.views.iter().map(|v| &v.image))
                .chain(scene.fitted_grid.iter());
            for r in refs {
                self.check_file(r)?;
            }
        }
        Ok(())
    }

    fn check_file(&self, r: &FileRef) -> Result<Vec<u8>> {
        let path = self.root.join(&r.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let crc = crc32fast::hash(&bytes);
        if crc != r.crc32 {
            return Err(self.err(format!(
                "{}: checksum {crc:#010x} does not match manifest {:#010x}",
                r.path, r.crc32
            )));
        }
        Ok(bytes)
    }

    pub fn len(&self) -> usize {
        self.manifest.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.scenes.is_empty()
    }

    pub fn scene_index(&self, id: &str) -> Option<usize> {
        self.manifest.scenes.iter().position(|s| s.id == id)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        self.manifest.intrinsics
    }

    pub fn quadrature(&self) -> QuadratureConfig {
        self.manifest.config.quadrature()
    }

    pub fn activation(&self) -> ActivationParams {
        self.manifest.config.activation
    }

    pub fn gt_grid(&self, scene: usize) -> Result<VoxelGrid> {
        let r = &self.manifest.scenes[scene].grid;
        Ok(VoxelGrid::from_bytes(&self.check_file(r)?)?)
    }

    pub fn fitted_grid(&self, scene: usize) -> Result<Option<VoxelGrid>> {
        match &self.manifest.scenes[scene].fitted_grid {
            Some(r) => Ok(Some(VoxelGrid::from_bytes(&self.check_file(r)?)?)),
            None => Ok(None),
        }
    }

    pub fn poses(&self, scene: usize) -> Result<Vec<CameraPose>> {
        self.manifest.scenes[scene]
            .views
            .iter()
            .map(|v| CameraPose::from_flat(&v.rotation, &v.position))
            .collect()
    }

    pub fn view(&self, scene: usize, view: usize) -> Result<View> {
        let entry = self.manifest.scenes[scene]
            .views
            .get(view)
            .ok_or_else(|| self.err(format!("scene {scene} has no view {view}")))?;
        let bytes = self.check_file(&entry.image)?;
        let image = Image::from_ppm(&bytes).map_err(|reason| Error::Image {
            path: self.root.join(&entry.image.path),
            reason,
        })?;
        Ok(View {
            pose: CameraPose::from_flat(&entry.rotation, &entry.position)?,
            image,
        })
    }

    pub fn views(&self, scene: usize) -> Result<Vec<View>> {
        (0..self.manifest.scenes[scene].views.len())
            .map(|j| self.view(scene, j))
            .collect()
    }

    /// Stores a fitted grid for `scene` and rewrites the manifest.
    pub fn set_fitted(&mut self, scene: usize, grid: &VoxelGrid) -> Result<()> {
        let rel = format!("scenes/{}/fitted.vxgr", self.manifest.scenes[scene].id);
        let r = file_ref(&self.root, rel, &grid.to_bytes())?;
        self.manifest.scenes[scene].fitted_grid = Some(r);
        write_manifest(&self.root, &self.manifest)
    }
}
