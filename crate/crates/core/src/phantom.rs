//! Synthetic head phantoms whose structure is driven by age.
//!
//! A phantom is a sphere of brain tissue: a white-matter core around a CSF
//! ventricle, a gray-matter shell, and an outer CSF rim. With age the
//! ventricle grows and the gray-matter shell thins while the rim widens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::volume::{BrainMask, LabelVolume, Volume, BACKGROUND, CSF, GM, WM};

pub const AGE_MIN: f64 = 18.0;
pub const AGE_MAX: f64 = 88.0;

pub const WM_INTENSITY: f32 = 1.0;
pub const GM_INTENSITY: f32 = 0.7;
pub const CSF_INTENSITY: f32 = 0.2;

/// A generated phantom is an ordinary [`Sample`].
pub type PhantomSample = Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub age: f64,
    /// Ventricle radius growth, voxels per year.
    pub ventricle_gain: f64,
    /// Gray-matter thinning, voxels per year.
    pub gm_thin_rate: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// Outer brain radius in voxels.
    pub brain_radius: f64,
    pub ventricle_base: f64,
    pub gm_base: f64,
    pub rim_base: f64,
    /// Maximum random offset of the brain centre, voxels per axis.
    pub center_jitter: f64,
    /// Maximum random change of the brain radius, voxels.
    pub radius_jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::scaled([64; 3], AGE_MIN, 0)
    }
}

impl PhantomSpec {
    /// Geometry proportional to the smallest grid extent; 64³ gives a 26-voxel brain radius.
    pub fn scaled(dims: [usize; 3], age: f64, seed: u64) -> Self {
        let s = *dims.iter().min().unwrap_or(&64) as f64 / 64.0;
        Self {
            dims,
            age,
            ventricle_gain: 0.12 * s,
            gm_thin_rate: 0.06 * s,
            noise_sd: 0.05,
            seed,
            brain_radius: 26.0 * s,
            ventricle_base: 4.0 * s,
            gm_base: 7.0 * s,
            rim_base: 2.0 * s,
            center_jitter: 2.0 * s,
            radius_jitter: 1.0 * s,
        }
    }

    pub fn with_age(mut self, age: f64) -> Self {
        self.age = age;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn ventricle_radius(&self) -> f64 {
        self.ventricle_base + self.ventricle_gain * (self.age - AGE_MIN)
    }

    pub fn gm_thickness(&self) -> f64 {
        self.gm_base - self.gm_thin_rate * (self.age - AGE_MIN)
    }

    /// CSF rim widens by what the gray-matter shell loses.
    pub fn rim_thickness(&self) -> f64 {
        self.rim_base + self.gm_thin_rate * (self.age - AGE_MIN)
    }

    pub fn validate(&self) -> Result<()> {
        if !(AGE_MIN..=AGE_MAX).contains(&self.age) {
            return Err(Error::Spec(format!("age {} outside [{AGE_MIN}, {AGE_MAX}]", self.age)));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Spec(format!("dims must be positive, got {:?}", self.dims)));
        }
        if self.ventricle_gain <= 0.0 || self.gm_thin_rate <= 0.0 {
            return Err(Error::Spec("ventricle_gain and gm_thin_rate must be positive".into()));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Spec(format!("noise_sd must be >= 0, got {}", self.noise_sd)));
        }
        if self.gm_thickness() <= 0.0 {
            return Err(Error::Spec(format!(
                "gray-matter thickness {:.3} is not positive at age {}",
                self.gm_thickness(),
                self.age
            )));
        }
        let min_radius = self.brain_radius - self.radius_jitter;
        let wm_outer = min_radius - self.rim_thickness() - self.gm_thickness();
        if self.ventricle_radius() >= wm_outer {
            return Err(Error::Spec(format!(
                "ventricle radius {:.2} does not fit inside the white-matter boundary {:.2}",
                self.ventricle_radius(),
                wm_outer
            )));
        }
        let half = *self.dims.iter().min().unwrap() as f64 / 2.0;
        if self.brain_radius + self.radius_jitter + self.center_jitter >= half {
            return Err(Error::Spec(format!(
                "brain radius {} does not fit in dims {:?}",
                self.brain_radius, self.dims
            )));
        }
        Ok(())
    }
}

/// Builds one phantom; identical specs give identical samples.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut centre = [0.0f64; 3];
    for (a, c) in centre.iter_mut().enumerate() {
        let j = if spec.center_jitter > 0.0 {
            rng.gen_range(-spec.center_jitter..=spec.center_jitter)
        } else {
            0.0
        };
        *c = (spec.dims[a] as f64 - 1.0) / 2.0 + j;
    }
    let radius = spec.brain_radius
        + if spec.radius_jitter > 0.0 {
            rng.gen_range(-spec.radius_jitter..=spec.radius_jitter)
        } else {
            0.0
        };
    let r_csf_outer = radius;
    let r_gm_outer = radius - spec.rim_thickness();
    let r_wm_outer = r_gm_outer - spec.gm_thickness();
    let r_vent = spec.ventricle_radius();

    let [dx, dy, dz] = spec.dims;
    let n = dx * dy * dz;
    let mut labels = Vec::with_capacity(n);
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let d = ((x as f64 - centre[0]).powi(2)
                    + (y as f64 - centre[1]).powi(2)
                    + (z as f64 - centre[2]).powi(2))
                .sqrt();
                labels.push(if d < r_vent {
                    CSF
                } else if d < r_wm_outer {
                    WM
                } else if d < r_gm_outer {
                    GM
                } else if d < r_csf_outer {
                    CSF
                } else {
                    BACKGROUND
                });
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_sd.max(0.0)).map_err(|e| Error::Spec(e.to_string()))?;
    let image: Vec<f32> = labels
        .iter()
        .map(|&l| {
            let base = match l {
                WM => WM_INTENSITY,
                GM => GM_INTENSITY,
                CSF => CSF_INTENSITY,
                _ => 0.0,
            };
            let e = if spec.noise_sd > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
            // the mask is applied after noise so the background stays exactly zero
            if l == BACKGROUND {
                0.0
            } else {
                base + e
            }
        })
        .collect();
    let mask = BrainMask::new(spec.dims, labels.iter().map(|&l| l != BACKGROUND).collect())?;
    let tissues = LabelVolume::tissues(spec.dims, labels)?;
    for code in [GM, WM, CSF] {
        if tissues.count(code) == 0 {
            return Err(Error::Spec(format!("tissue class {code} is empty for this geometry")));
        }
    }
    Ok(Sample {
        id: format!("phantom-{:016x}", spec.seed),
        image: Volume::new(spec.dims, [1.0; 3], image)?,
        mask,
        tissues,
        age: spec.age,
    })
}

/// `n` phantoms with ages uniform on `[age_low, age_high]`, geometry from `template`.
pub fn generate_cohort_with(
    template: &PhantomSpec,
    n: usize,
    age_low: f64,
    age_high: f64,
    seed: u64,
) -> Result<Vec<PhantomSample>> {
    cohort_specs(template, n, age_low, age_high, seed)?
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut p = generate_phantom(s)?;
            p.id = format!("sub-{i:04}");
            Ok(p)
        })
        .collect()
}

/// Desk-scale (64³) cohort.
pub fn generate_cohort(n: usize, age_low: f64, age_high: f64, seed: u64) -> Result<Vec<PhantomSample>> {
    generate_cohort_with(&PhantomSpec::default(), n, age_low, age_high, seed)
}

/// Per-sample specs for a cohort: ages and seeds both drawn from the master seed.
pub fn cohort_specs(
    template: &PhantomSpec,
    n: usize,
    age_low: f64,
    age_high: f64,
    seed: u64,
) -> Result<Vec<PhantomSpec>> {
    if n == 0 {
        return Err(Error::Spec("cohort size must be at least 1".into()));
    }
    if !(age_low < age_high) || age_low < AGE_MIN || age_high > AGE_MAX {
        return Err(Error::Spec(format!(
            "age range [{age_low}, {age_high}] must be increasing and within [{AGE_MIN}, {AGE_MAX}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let age = rng.gen_range(age_low..=age_high);
            let s: u64 = rng.gen();
            template.clone().with_age(age).with_seed(s)
        })
        .collect())
}
